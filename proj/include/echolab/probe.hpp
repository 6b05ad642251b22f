#pragma once

#include <vector>

#include "echolab/data.hpp"
#include "echolab/nets.hpp"

namespace echolab {

// Two-tower image/prompt probe used only for evaluation. Trained once on the
// pretraining corpus with paired (image, prompt) data, then frozen. The
// concept slot is skipped when embedding prompts, mirroring how CLIP-T scores
// drop the learnable pseudo-token.
struct AlignmentProbe {
    ParamStore params;
    ConvEncoder img_tower;
    LinearLayer img_fc;
    Param* text_table = nullptr;
    LinearLayer text_fc;
    int out_dim = 64;
    int text_embed_dim = 48;
    int max_len = 8;

    AlignmentProbe() = default;
    AlignmentProbe(const ArchConfig& a, uint64_t seed) {
        Rng rng = derive_rng(seed, "probe");
        max_len = a.max_prompt_len;
        img_tower = ConvEncoder(params, "img", a.img_channels, {16, 32, 64}, 3,
                                a.img_size, rng);
        img_fc = LinearLayer(params, "img_fc", img_tower.feature_dim(), out_dim, rng);
        text_table = params.add(
            "text_table",
            Tensor::randn({a.vocab_size + 1, text_embed_dim}, rng, 0.3));
        text_fc = LinearLayer(params, "text_fc", text_embed_dim, out_dim, rng);
    }

    AlignmentProbe(const AlignmentProbe&) = delete;
    AlignmentProbe& operator=(const AlignmentProbe&) = delete;
    AlignmentProbe(AlignmentProbe&&) = default;
    AlignmentProbe& operator=(AlignmentProbe&&) = default;

    void freeze() {
        for (auto* p : params.all()) p->set_trainable(false);
    }

    static Var normalize_rows(const Var& x) {
        int D = x.shape().back();
        Var n2 = ops::add_scalar(ops::sum_last(ops::mul(x, x)), 1e-12);
        return ops::mul(x, ops::broadcast_last(ops::recip_v(ops::sqrt_v(n2)), D));
    }

    // model-space images (B,C,H,W) -> unit rows (B,out_dim)
    Var embed_images(const Var& images) const {
        return normalize_rows(img_fc(img_tower(images)));
    }

    // prompts -> unit rows (B,out_dim); concept/pad tokens are masked out of
    // the mean pooling
    Var embed_prompts(const std::vector<std::vector<int>>& prompts) const {
        int B = static_cast<int>(prompts.size());
        int L = max_len;
        std::vector<int> ids(static_cast<size_t>(B) * L, 0);
        Tensor mask({B, L, 1});
        for (int b = 0; b < B; b++) {
            int kept = 0;
            for (int tok : prompts[static_cast<size_t>(b)]) {
                if (tok == kConceptTokenId || tok == 0) continue;
                if (kept >= L) break;
                ids[static_cast<size_t>(b) * L + kept] = tok;
                kept++;
            }
            double w = kept > 0 ? 1.0 / kept : 0.0;
            for (int l = 0; l < kept; l++) mask[(static_cast<size_t>(b) * L + l)] = w;
        }
        Var emb = ops::embedding(const_cast<Param*>(text_table)->var, ids, B, L);
        Var weighted = ops::mul(emb, ops::broadcast_last(Var::constant(mask),
                                                         text_embed_dim));
        Var pooled = ops::mul_scalar(ops::mean_axis1(weighted), static_cast<double>(L));
        return normalize_rows(text_fc(pooled));
    }
};

}  // namespace echolab
