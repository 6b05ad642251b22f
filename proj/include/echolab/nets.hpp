#pragma once

#include <string>
#include <vector>

#include "echolab/nn.hpp"
#include "echolab/schedule.hpp"

namespace echolab {

// Architecture hyperparameters, persisted verbatim in checkpoint manifests.
struct ArchConfig {
    int img_channels = 3;
    int img_size = 32;
    int ch1 = 32, ch2 = 48, ch3 = 64;  // U-Net widths at 32/16/8
    int cond_dim = 64;
    int ctx_tokens = 4;  // condition vector reshaped to ctx_tokens x (cond_dim/ctx_tokens)
    int temb_dim = 64;
    int vocab_size = 32;      // template words; the concept slot is one extra row
    int max_prompt_len = 8;   // sequences are padded/truncated to this
    int token_embed_dim = 64;
    std::vector<int> embedder_widths = {16, 32, 64, 64};
};

// ---------------------------------------------------------------------------
// conditioning encoder (shared between teacher and student)
// ---------------------------------------------------------------------------

// Token table + learnable positional table, mean-pooled and passed through a
// two-layer MLP. The novel-concept slot lives in its own parameter row so
// the personalization policy can train it without touching the vocabulary.
struct ConditioningEncoder {
    ParamStore params;
    Param* token_table = nullptr;
    Param* concept_token = nullptr;
    Param* pos_table = nullptr;
    LinearLayer fc1, fc2;
    int vocab_size = 0, max_len = 0, embed_dim = 0, cond_dim = 0;

    ConditioningEncoder() = default;
    ConditioningEncoder(const ArchConfig& a, uint64_t seed) {
        Rng rng = derive_rng(seed, "encoder");
        vocab_size = a.vocab_size;
        max_len = a.max_prompt_len;
        embed_dim = a.token_embed_dim;
        cond_dim = a.cond_dim;
        token_table = params.add(
            "token_table", Tensor::randn({vocab_size, embed_dim}, rng, 0.3));
        concept_token =
            params.add("concept_token", Tensor::randn({1, embed_dim}, rng, 0.3));
        pos_table =
            params.add("pos_table", Tensor::randn({max_len, embed_dim}, rng, 0.1));
        fc1 = LinearLayer(params, "fc1", embed_dim, 2 * embed_dim, rng);
        fc2 = LinearLayer(params, "fc2", 2 * embed_dim, cond_dim, rng);
    }

    int concept_id() const { return vocab_size; }
    int pad_id() const { return 0; }  // vocab word 0 doubles as padding

    // pad/truncate a token sequence to max_len
    std::vector<int> canonical(const std::vector<int>& tokens) const {
        std::vector<int> out(static_cast<size_t>(max_len), pad_id());
        for (size_t i = 0; i < tokens.size() && i < static_cast<size_t>(max_len); i++) {
            check(tokens[i] >= 0 && tokens[i] <= vocab_size,
                  "unknown token id " + std::to_string(tokens[i]));
            out[i] = tokens[i];
        }
        return out;
    }

    // encode a batch of prompts -> (B, cond_dim)
    Var encode(const std::vector<std::vector<int>>& prompts) const {
        int B = static_cast<int>(prompts.size());
        std::vector<int> ids;
        ids.reserve(static_cast<size_t>(B) * max_len);
        std::vector<int> pos_ids;
        pos_ids.reserve(ids.capacity());
        for (const auto& p : prompts) {
            auto c = canonical(p);
            ids.insert(ids.end(), c.begin(), c.end());
            for (int l = 0; l < max_len; l++) pos_ids.push_back(l);
        }
        Var table = ops::concat_rows(
            const_cast<Param*>(token_table)->var, const_cast<Param*>(concept_token)->var);
        Var emb = ops::embedding(table, ids, B, max_len);
        Var pos = ops::embedding(const_cast<Param*>(pos_table)->var, pos_ids, B, max_len);
        Var pooled = ops::mean_axis1(ops::add(emb, pos));
        return fc2(ops::silu_v(fc1(pooled)));
    }
};

// ---------------------------------------------------------------------------
// denoiser U-Net
// ---------------------------------------------------------------------------

// 3-level conditional U-Net predicting the injected noise. One cross-attention
// block per level (and per decoder level); t enters through a sinusoidal
// embedding -> MLP -> per-channel bias in each ResBlock.
struct UNet {
    ParamStore params;
    ArchConfig arch;
    LinearLayer time_fc1, time_fc2;
    Conv2dLayer conv_in;
    ResBlock res1, res2, res_mid, res_up2, res_up1;
    CrossAttention attn1, attn2, attn_mid, attn_up2, attn_up1;
    Conv2dLayer down1, down2, upconv2, upconv1;
    GroupNormLayer norm_out;
    Conv2dLayer conv_out;
    mutable long eval_count = 0;  // instrumentation for NFE accounting

    UNet() = default;
    UNet(const ArchConfig& a, uint64_t seed) : arch(a) {
        Rng rng = derive_rng(seed, "unet");
        int ctx_dim = a.cond_dim / a.ctx_tokens;
        time_fc1 = LinearLayer(params, "time.fc1", a.temb_dim, a.temb_dim, rng);
        time_fc2 = LinearLayer(params, "time.fc2", a.temb_dim, a.temb_dim, rng);
        conv_in = Conv2dLayer(params, "conv_in", a.img_channels, a.ch1, 3, 1, 1, rng);
        res1 = ResBlock(params, "enc1.res", a.ch1, a.ch1, a.temb_dim, rng);
        attn1 = CrossAttention(params, "enc1.attn", a.ch1, ctx_dim, rng);
        down1 = Conv2dLayer(params, "down1", a.ch1, a.ch2, 3, 2, 1, rng);
        res2 = ResBlock(params, "enc2.res", a.ch2, a.ch2, a.temb_dim, rng);
        attn2 = CrossAttention(params, "enc2.attn", a.ch2, ctx_dim, rng);
        down2 = Conv2dLayer(params, "down2", a.ch2, a.ch3, 3, 2, 1, rng);
        res_mid = ResBlock(params, "mid.res", a.ch3, a.ch3, a.temb_dim, rng);
        attn_mid = CrossAttention(params, "mid.attn", a.ch3, ctx_dim, rng);
        upconv2 = Conv2dLayer(params, "upconv2", a.ch3, a.ch2, 3, 1, 1, rng);
        res_up2 = ResBlock(params, "dec2.res", 2 * a.ch2, a.ch2, a.temb_dim, rng);
        attn_up2 = CrossAttention(params, "dec2.attn", a.ch2, ctx_dim, rng);
        upconv1 = Conv2dLayer(params, "upconv1", a.ch2, a.ch1, 3, 1, 1, rng);
        res_up1 = ResBlock(params, "dec1.res", 2 * a.ch1, a.ch1, a.temb_dim, rng);
        attn_up1 = CrossAttention(params, "dec1.attn", a.ch1, ctx_dim, rng);
        norm_out = GroupNormLayer(params, "norm_out", a.ch1, norm_groups(a.ch1));
        conv_out = Conv2dLayer(params, "conv_out", a.ch1, a.img_channels, 3, 1, 1, rng,
                               1e-2);
    }

    // x: (B,C,H,W), scalar timestep t, cond: (B,cond_dim) -> predicted noise
    Var operator()(const Var& x, int t, const Var& cond) const {
        eval_count++;
        int B = x.shape()[0];
        Tensor sin_t = sinusoidal_embedding(t, arch.temb_dim);
        Tensor temb_in({B, arch.temb_dim});
        for (int i = 0; i < B; i++)
            std::copy_n(sin_t.data(), arch.temb_dim,
                        temb_in.data() + static_cast<size_t>(i) * arch.temb_dim);
        Var temb = time_fc2(ops::silu_v(time_fc1(Var::constant(temb_in))));
        Var ctx = ops::reshape_v(cond,
                                 {B, arch.ctx_tokens, arch.cond_dim / arch.ctx_tokens});

        Var h = conv_in(x);
        Var e1 = attn1(res1(h, temb), ctx);
        Var e2 = attn2(res2(down1(e1), temb), ctx);
        Var m = attn_mid(res_mid(down2(e2), temb), ctx);
        Var d2 = upconv2(ops::upsample_nearest2x(m));
        d2 = attn_up2(res_up2(ops::concat_channels(d2, e2), temb), ctx);
        Var d1 = upconv1(ops::upsample_nearest2x(d2));
        d1 = attn_up1(res_up1(ops::concat_channels(d1, e1), temb), ctx);
        return conv_out(ops::silu_v(norm_out(d1)));
    }
};

// A one-step generator is a denoiser evaluated once at t = T with its output
// mapped back to image space. Exactly one network evaluation per call.
inline Var generate_one_step(const UNet& net, const NoiseSchedule& s, const Var& x_T,
                             const Var& cond) {
    Var eps_hat = net(x_T, s.T, cond);
    return predict_denoised(x_T, eps_hat, s.T, s, DenoisedMode::kStandard);
}

// ---------------------------------------------------------------------------
// identity embedder (frozen feature extractor)
// ---------------------------------------------------------------------------

struct IdentityEmbedder {
    ParamStore params;
    ConvEncoder enc;
    int feat_dim = 0;

    IdentityEmbedder() = default;
    IdentityEmbedder(const ArchConfig& a, uint64_t seed) {
        Rng rng = derive_rng(seed, "embedder");
        enc = ConvEncoder(params, "enc", a.img_channels, a.embedder_widths, 3,
                          a.img_size, rng);
        feat_dim = enc.feature_dim();
    }

    void freeze() {
        for (auto* p : params.all()) p->set_trainable(false);
    }

    // images: (B,C,H,W) -> (B, feat_dim)
    Var features(const Var& images) const { return enc(images); }
};

inline Var identity_features(const IdentityEmbedder& e, const Var& images) {
    check(images.shape().size() == 4, "identity_features: expected (B,C,H,W)");
    return e.features(images);
}

// ---------------------------------------------------------------------------
// trainable-parameter policies
// ---------------------------------------------------------------------------

enum class ParamPolicy { kNone, kAll, kKvOnly, kEncoderConceptToken };

inline const char* policy_name(ParamPolicy p) {
    switch (p) {
        case ParamPolicy::kNone: return "none";
        case ParamPolicy::kAll: return "all";
        case ParamPolicy::kKvOnly: return "kv_only";
        case ParamPolicy::kEncoderConceptToken: return "encoder_concept_token";
    }
    return "?";
}

inline bool is_kv_param(const std::string& name) {
    auto ends_with = [&](const std::string& suf) {
        return name.size() >= suf.size() &&
               name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    return name.find(".attn.") != std::string::npos &&
           (ends_with(".wk.weight") || ends_with(".wv.weight"));
}

// Flags the selected parameters trainable and everything else frozen;
// returns the selection.
inline std::vector<Param*> select_trainable(ParamStore& ps, ParamPolicy policy) {
    std::vector<Param*> picked;
    for (auto* p : ps.all()) {
        bool take = false;
        switch (policy) {
            case ParamPolicy::kNone: take = false; break;
            case ParamPolicy::kAll: take = true; break;
            case ParamPolicy::kKvOnly: take = is_kv_param(p->name); break;
            case ParamPolicy::kEncoderConceptToken:
                take = (p->name == "concept_token");
                break;
        }
        p->set_trainable(take);
        if (take) picked.push_back(p);
    }
    if (policy == ParamPolicy::kKvOnly || policy == ParamPolicy::kEncoderConceptToken)
        check(!picked.empty(),
              std::string("policy ") + policy_name(policy) + " matched no parameters");
    return picked;
}

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

// Everything the two-model system carries: one shared conditioning encoder,
// the multi-step teacher, the one-step student and the frozen embedder.
struct ModelBundle {
    ArchConfig arch;
    NoiseSchedule schedule;
    ConditioningEncoder encoder;
    UNet teacher;
    UNet student;
    IdentityEmbedder embedder;

    ModelBundle() = default;
    ModelBundle(const ArchConfig& a, const NoiseSchedule& s, uint64_t seed)
        : arch(a),
          schedule(s),
          encoder(a, derive_seed(seed, "encoder_init")),
          teacher(a, derive_seed(seed, "teacher_init")),
          student(a, derive_seed(seed, "student_init")),
          embedder(a, derive_seed(seed, "embedder_init")) {}
};

}  // namespace echolab
