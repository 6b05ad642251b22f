#pragma once

#include <deque>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "echolab/ops.hpp"

namespace echolab {

// A named leaf parameter. Trainability is a mutable flag on the leaf node;
// ops snapshot it when the graph is built.
struct Param {
    std::string name;
    Var var;

    void set_trainable(bool b) { var.node()->requires_grad = b; }
    bool trainable() const { return var.node()->requires_grad; }
    const Tensor& value() const { return var.val(); }
    Tensor& value() { return var.mutable_val(); }
};

// Owns parameters in registration order; addresses stay stable (deque), so
// layer structs can hold raw Param pointers. Copying would alias leaf nodes,
// hence move-only; snapshots go through copy_from on a freshly built twin.
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    Param* add(const std::string& name, Tensor init) {
        check(index_.find(name) == index_.end(), "duplicate param name: " + name);
        params_.push_back(Param{name, Var::leaf(std::move(init), true)});
        index_[name] = params_.size() - 1;
        return &params_.back();
    }

    Param* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    std::vector<Param*> all() {
        std::vector<Param*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(&p);
        return out;
    }
    std::vector<const Param*> all() const {
        std::vector<const Param*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    size_t count() const { return params_.size(); }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    // copy values by name; shapes must match
    void copy_from(const ParamStore& other) {
        check(params_.size() == other.params_.size(), "param store size mismatch");
        for (size_t i = 0; i < params_.size(); i++) {
            check(params_[i].name == other.params_[i].name,
                  "param name mismatch: " + params_[i].name);
            check(params_[i].value().same_shape(other.params_[i].value()),
                  "param shape mismatch: " + params_[i].name);
            params_[i].var.mutable_val() = other.params_[i].value().clone();
        }
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& p : params_) {
            h = fnv1a(p.name.data(), p.name.size(), h);
            const Tensor& t = p.value();
            h = fnv1a(t.data(), t.size() * sizeof(double), h);
        }
        return h;
    }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.value().size();
        return n;
    }

private:
    std::deque<Param> params_;
    std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

// largest group count <= 8 that divides the channel width
inline int norm_groups(int channels) {
    for (int g = std::min(8, channels); g >= 1; g--)
        if (channels % g == 0) return g;
    return 1;
}

struct LinearLayer {
    Param* w = nullptr;
    Param* b = nullptr;

    LinearLayer() = default;
    LinearLayer(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                bool bias = true, double scale = -1.0) {
        double std = scale > 0 ? scale : std::sqrt(2.0 / in);
        w = ps.add(name + ".weight", Tensor::randn({out, in}, rng, std));
        if (bias) b = ps.add(name + ".bias", Tensor::zeros({out}));
    }

    Var operator()(const Var& x) const {
        return ops::linear(x, w->var, b ? b->var : Var());
    }
};

struct Conv2dLayer {
    Param* w = nullptr;
    Param* b = nullptr;
    int stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore& ps, const std::string& name, int cin, int cout, int k,
                int stride_, int pad_, Rng& rng, double scale = -1.0)
        : stride(stride_), pad(pad_) {
        double std = scale > 0 ? scale : std::sqrt(2.0 / (cin * k * k));
        w = ps.add(name + ".weight", Tensor::randn({cout, cin, k, k}, rng, std));
        b = ps.add(name + ".bias", Tensor::zeros({cout}));
    }

    Var operator()(const Var& x) const {
        return ops::conv2d(x, w->var, b->var, stride, pad);
    }
};

struct GroupNormLayer {
    Param* gamma = nullptr;
    Param* beta = nullptr;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore& ps, const std::string& name, int channels, int groups_)
        : groups(groups_) {
        gamma = ps.add(name + ".gamma", Tensor::full({channels}, 1.0));
        beta = ps.add(name + ".beta", Tensor::zeros({channels}));
    }

    Var operator()(const Var& x) const {
        return ops::group_norm(x, gamma->var, beta->var, groups);
    }
};

// Cross-attention over context tokens; projection layers are bias-free so the
// key/value parameter set is exactly {wk.weight, wv.weight}.
struct CrossAttention {
    GroupNormLayer norm;
    LinearLayer wq, wk, wv, wo;
    int channels = 0;

    CrossAttention() = default;
    CrossAttention(ParamStore& ps, const std::string& name, int channels_, int ctx_dim,
                   Rng& rng)
        : channels(channels_) {
        norm = GroupNormLayer(ps, name + ".norm", channels_, norm_groups(channels_));
        double s = std::sqrt(1.0 / channels_);
        double sk = std::sqrt(1.0 / ctx_dim);
        wq = LinearLayer(ps, name + ".wq", channels_, channels_, rng, false, s);
        wk = LinearLayer(ps, name + ".wk", ctx_dim, channels_, rng, false, sk);
        wv = LinearLayer(ps, name + ".wv", ctx_dim, channels_, rng, false, sk);
        wo = LinearLayer(ps, name + ".wo", channels_, channels_, rng, false, s);
    }

    // x: (B,C,H,W), ctx: (B,Tctx,ctx_dim)
    Var operator()(const Var& x, const Var& ctx) const {
        int H = x.shape()[2], W = x.shape()[3];
        Var tokens = ops::nchw_to_tokens(norm(x));
        Var q = wq(tokens);
        Var k = wk(ctx);
        Var v = wv(ctx);
        Var attn = ops::softmax_last(
            ops::mul_scalar(ops::bmm_nt(q, k), 1.0 / std::sqrt(channels)));
        Var o = wo(ops::bmm_nn(attn, v));
        return ops::add(x, ops::tokens_to_nchw(o, H, W));
    }
};

struct ResBlock {
    GroupNormLayer norm1, norm2;
    Conv2dLayer conv1, conv2;
    LinearLayer temb_proj;
    Conv2dLayer skip;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(ParamStore& ps, const std::string& name, int cin, int cout, int temb_dim,
             Rng& rng) {
        norm1 = GroupNormLayer(ps, name + ".norm1", cin, norm_groups(cin));
        conv1 = Conv2dLayer(ps, name + ".conv1", cin, cout, 3, 1, 1, rng);
        temb_proj = LinearLayer(ps, name + ".temb", temb_dim, cout, rng);
        norm2 = GroupNormLayer(ps, name + ".norm2", cout, norm_groups(cout));
        conv2 = Conv2dLayer(ps, name + ".conv2", cout, cout, 3, 1, 1, rng);
        if (cin != cout) {
            has_skip = true;
            skip = Conv2dLayer(ps, name + ".skip", cin, cout, 1, 1, 0, rng);
        }
    }

    // temb: (B, temb_dim)
    Var operator()(const Var& x, const Var& temb) const {
        Var h = conv1(ops::silu_v(norm1(x)));
        h = ops::add_channel_bias(h, temb_proj(temb));
        h = conv2(ops::silu_v(norm2(h)));
        Var res = has_skip ? skip(x) : x;
        return ops::add(h, res);
    }
};

// sinusoidal timestep features, half cos / half sin
inline Tensor sinusoidal_embedding(int t, int dim) {
    Tensor out({dim});
    int half = dim / 2;
    double log_base = std::log(10000.0) / half;
    for (int i = 0; i < half; i++) {
        double freq = std::exp(-i * log_base);
        out[i] = std::cos(t * freq);
        out[i + half] = std::sin(t * freq);
    }
    return out;
}

// A stack of stride-2 convs with SiLU, used by the identity embedder, the
// critic backbones and the probe image tower. 32x32 input -> (cn, 32/2^n)^2.
struct ConvEncoder {
    std::vector<Conv2dLayer> convs;
    int out_channels = 0, out_hw = 0;

    ConvEncoder() = default;
    ConvEncoder(ParamStore& ps, const std::string& name, int in_ch,
                const std::vector<int>& widths, int kernel, int in_hw, Rng& rng) {
        int c = in_ch, hw = in_hw;
        for (size_t i = 0; i < widths.size(); i++) {
            convs.emplace_back(ps, name + ".conv" + std::to_string(i), c, widths[i],
                               kernel, 2, kernel / 2, rng);
            c = widths[i];
            hw /= 2;
        }
        out_channels = c;
        out_hw = hw;
    }

    int feature_dim() const { return out_channels * out_hw * out_hw; }

    // returns flattened (B, feature_dim)
    Var operator()(const Var& x) const {
        Var h = x;
        for (const auto& cv : convs) h = ops::silu_v(cv(h));
        int B = h.shape()[0];
        return ops::reshape_v(h, {B, feature_dim()});
    }
};

// Mirror decoder (upsample + conv) for autoencoder pretraining of the frozen
// feature extractors.
struct ConvDecoder {
    std::vector<Conv2dLayer> convs;
    int in_channels = 0, in_hw = 0;

    ConvDecoder() = default;
    ConvDecoder(ParamStore& ps, const std::string& name, int in_ch, int in_hw_,
                const std::vector<int>& widths, int out_ch, Rng& rng)
        : in_channels(in_ch), in_hw(in_hw_) {
        int c = in_ch;
        for (size_t i = 0; i < widths.size(); i++) {
            convs.emplace_back(ps, name + ".conv" + std::to_string(i), c, widths[i], 3,
                               1, 1, rng);
            c = widths[i];
        }
        convs.emplace_back(ps, name + ".conv_out", c, out_ch, 3, 1, 1, rng);
    }

    // feat: (B, in_channels*in_hw*in_hw)
    Var operator()(const Var& feat) const {
        int B = feat.shape()[0];
        Var h = ops::reshape_v(feat, {B, in_channels, in_hw, in_hw});
        for (size_t i = 0; i + 1 < convs.size(); i++)
            h = ops::silu_v(convs[i](ops::upsample_nearest2x(h)));
        return convs.back()(h);
    }
};

// cosine similarity over rows of (B,D) with an epsilon-guarded norm
inline Var cosine_rows(const Var& a, const Var& b, double eps = 1e-8) {
    Var dot = ops::sum_last(ops::mul(a, b));
    Var na = ops::sqrt_v(ops::add_scalar(ops::sum_last(ops::mul(a, a)), eps * eps));
    Var nb = ops::sqrt_v(ops::add_scalar(ops::sum_last(ops::mul(b, b)), eps * eps));
    return ops::mul(dot, ops::recip_v(ops::mul(na, nb)));
}

}  // namespace echolab
