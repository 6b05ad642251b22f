#pragma once

#include <memory>
#include <string>
#include <vector>

#include "echolab/losses.hpp"
#include "echolab/nn.hpp"

namespace echolab {

// One discriminator: a frozen conv backbone (distinct receptive field per
// critic) and a trainable two-layer head ending in a sigmoid.
struct BackboneSpec {
    int kernel = 3;
    std::vector<int> widths = {16, 32, 48};
};

inline std::vector<BackboneSpec> default_critic_specs() {
    return {BackboneSpec{3, {16, 32, 48}}, BackboneSpec{5, {16, 32, 48}},
            BackboneSpec{7, {16, 32, 48}}};
}

struct Critic {
    BackboneSpec spec;
    ParamStore backbone_params;
    ParamStore head_params;
    ConvEncoder backbone;
    LinearLayer fc1, fc2;
    int head_hidden = 128;

    Critic() = default;
    Critic(const BackboneSpec& s, int img_channels, int img_size, uint64_t seed)
        : spec(s) {
        Rng rng(seed);
        backbone = ConvEncoder(backbone_params, "backbone", img_channels, s.widths,
                               s.kernel, img_size, rng);
        fc1 = LinearLayer(head_params, "head.fc1", backbone.feature_dim(), head_hidden,
                          rng);
        // small final init keeps fresh scores near 0.5
        fc2 = LinearLayer(head_params, "head.fc2", head_hidden, 1, rng, true, 1e-2);
    }

    Critic(const Critic&) = delete;
    Critic& operator=(const Critic&) = delete;
    Critic(Critic&&) = default;
    Critic& operator=(Critic&&) = default;

    void freeze_backbone() {
        for (auto* p : backbone_params.all()) p->set_trainable(false);
    }

    // (B,C,H,W) -> probabilities (B,1), strictly inside (0,1)
    Var score(const Var& images) const {
        Var f = backbone(images);
        Var h = ops::leaky_relu_v(fc1(f), 0.2);
        return ops::sigmoid_v(fc2(h));
    }

    size_t head_param_count() const { return head_params.total_scalars(); }
};

struct CriticEnsemble {
    std::vector<Critic> critics;
    std::vector<double> lambda_k;

    CriticEnsemble() = default;
    CriticEnsemble(const CriticEnsemble&) = delete;
    CriticEnsemble& operator=(const CriticEnsemble&) = delete;
    CriticEnsemble(CriticEnsemble&&) = default;
    CriticEnsemble& operator=(CriticEnsemble&&) = default;

    size_t size() const { return critics.size(); }

    void freeze_backbones() {
        for (auto& c : critics) c.freeze_backbone();
    }
    std::vector<Param*> head_params() {
        std::vector<Param*> out;
        for (auto& c : critics)
            for (auto* p : c.head_params.all()) out.push_back(p);
        return out;
    }
    uint64_t heads_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& c : critics) {
            uint64_t ch = c.head_params.content_hash();
            h = fnv1a(&ch, sizeof(ch), h);
        }
        return h;
    }
};

// Deterministic construction from the seed; per-critic sub-seeds are derived
// so adding or removing critics leaves the others' init unchanged.
inline CriticEnsemble build_ensemble(const std::vector<BackboneSpec>& specs,
                                     uint64_t seed, int img_channels = 3,
                                     int img_size = 32) {
    check(!specs.empty(), "build_ensemble: empty spec list");
    CriticEnsemble e;
    e.lambda_k.assign(specs.size(), 1.0);
    for (size_t k = 0; k < specs.size(); k++)
        e.critics.emplace_back(specs[k], img_channels, img_size,
                               derive_seed(seed, "critic", k));
    return e;
}

// Scores from each critic in ensemble order.
inline std::vector<Var> score(const CriticEnsemble& e, const Var& images) {
    std::vector<Var> out;
    out.reserve(e.critics.size());
    for (const auto& c : e.critics) out.push_back(c.score(images));
    return out;
}

}  // namespace echolab
