#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <utility>

#include "echolab/checkpoint.hpp"
#include "echolab/losses.hpp"
#include "echolab/optim.hpp"
#include "echolab/sampler.hpp"

namespace echolab {

enum class Stage { kPretrain, kDistillBase, kPersonalize, kEcho };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::kPretrain: return "pretrain";
        case Stage::kDistillBase: return "distill-base";
        case Stage::kPersonalize: return "personalize";
        case Stage::kEcho: return "echo";
    }
    return "?";
}

struct TrainConfig {
    Stage stage = Stage::kPersonalize;
    int iterations = 1000;
    int batch_size = 2;
    double learning_rate = 2e-5;
    LossWeights weights;
    int swd_scales = 3;
    int swd_projections = 64;
    uint64_t seed = 0;
    int student_nfe = 1;  // fixed during training
    bool no_teacher = false;
    bool no_critics = false;
    // schedule spec (consumed when a fresh workspace is created)
    int schedule_T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    // pretrain extras: autoencoder/probe sub-stages
    int aux_iterations = 600;
    int aux_batch_size = 16;
    double aux_learning_rate = 1e-3;
    double pretrain_target_loss = 0.55;  // running L_rec must end below this
    double base_swd_threshold = 0.05;    // one-step samples vs corpus
};

inline void to_json(ordered_json& j, const TrainConfig& c) {
    j = ordered_json{{"stage", stage_name(c.stage)},
                     {"iterations", c.iterations},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"lambda_id", c.weights.lambda_id},
                     {"lambda_mse", c.weights.lambda_mse},
                     {"lambda_ms", c.weights.lambda_ms},
                     {"lambda_k", c.weights.lambda_k},
                     {"swd_scales", c.swd_scales},
                     {"swd_projections", c.swd_projections},
                     {"seed", c.seed},
                     {"student_nfe", c.student_nfe},
                     {"no_teacher", c.no_teacher},
                     {"no_critics", c.no_critics},
                     {"schedule_T", c.schedule_T},
                     {"beta_start", c.beta_start},
                     {"beta_end", c.beta_end},
                     {"aux_iterations", c.aux_iterations},
                     {"aux_batch_size", c.aux_batch_size},
                     {"aux_learning_rate", c.aux_learning_rate},
                     {"pretrain_target_loss", c.pretrain_target_loss},
                     {"base_swd_threshold", c.base_swd_threshold}};
}

struct IterRecord {
    int iter = 0;
    int t = 0;
    double c_t = 0.0;
    double loss_rec = 0.0;
    double loss_align = 0.0;
    double loss_gan_g = 0.0;
    double loss_gan_d = 0.0;
    long clamp_events = 0;
    long degenerate_norms = 0;
    double wall_ms = 0.0;
};

using HistorySink = std::function<void(const IterRecord&)>;

struct StageResult {
    std::string checkpoint_dir;
    std::vector<IterRecord> history;
    double wall_seconds = 0.0;
    long clamp_events = 0;
    long degenerate_norms = 0;
    bool target_met = true;
    double final_metric = 0.0;
};

// Everything a run carries between stages.
struct Workspace {
    ArchConfig arch;
    ModelBundle bundle;
    CriticEnsemble ensemble;
    AlignmentProbe probe;

    Workspace() = default;
    Workspace(const ArchConfig& a, const NoiseSchedule& s, uint64_t seed)
        : arch(a),
          bundle(a, s, seed),
          ensemble(build_ensemble(default_critic_specs(), seed, a.img_channels,
                                  a.img_size)),
          probe(a, seed) {}

    static Workspace from_checkpoint(Checkpoint&& ck) {
        Workspace ws;
        ws.arch = ck.arch;
        ws.bundle = std::move(ck.bundle);
        ws.ensemble = std::move(ck.ensemble);
        ws.probe = std::move(ck.probe);
        return ws;
    }

    void zero_all_grads() {
        bundle.teacher.params.zero_grad();
        bundle.student.params.zero_grad();
        bundle.encoder.params.zero_grad();
        bundle.embedder.params.zero_grad();
        probe.params.zero_grad();
        for (auto& c : ensemble.critics) {
            c.backbone_params.zero_grad();
            c.head_params.zero_grad();
        }
    }
};

namespace detail {

inline void require_finite(double v, const char* component, int iter) {
    if (!std::isfinite(v))
        throw DivergenceError(std::string("non-finite ") + component + " at iteration " +
                              std::to_string(iter));
}

inline Tensor randn_batch(int B, int C, int H, int W, Rng& rng) {
    Tensor t({B, C, H, W});
    for (size_t i = 0; i < t.size(); i++) t[i] = rng.normal();
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// batch providers
// ---------------------------------------------------------------------------

// Supplies the per-iteration training pairs (model-space images, prompts).
struct BatchProvider {
    virtual ~BatchProvider() = default;
    virtual std::pair<Tensor, std::vector<std::vector<int>>> get(int iter, int B) = 0;
};

// Random corpus pairs; prompts are the images' own captions.
struct CorpusProvider : BatchProvider {
    const Corpus* corpus;
    uint64_t seed;
    CorpusProvider(const Corpus& c, uint64_t s) : corpus(&c), seed(s) {}
    std::pair<Tensor, std::vector<std::vector<int>>> get(int iter, int B) override {
        Rng rng = derive_rng(seed, "batch", static_cast<uint64_t>(iter));
        std::vector<int> idx;
        std::vector<std::vector<int>> prompts;
        for (int j = 0; j < B; j++) {
            int i = static_cast<int>(
                rng.uniform_int(0, static_cast<int64_t>(corpus->size()) - 1));
            idx.push_back(i);
            prompts.push_back(corpus->prompts[static_cast<size_t>(i)]);
        }
        return {stack_to_model(corpus->images, idx), prompts};
    }
};

// Few-shot references, wrapped cyclically; prompts drawn from the template
// bank via the shared "tmpl" stream.
struct ConceptProvider : BatchProvider {
    std::vector<Tensor> refs01;
    std::vector<std::vector<int>> templates;
    uint64_t seed;
    ConceptProvider(const ConceptSet& cs, uint64_t s)
        : refs01(cs.references), templates(cs.templates), seed(s) {}
    std::pair<Tensor, std::vector<std::vector<int>>> get(int iter, int B) override {
        std::vector<int> idx;
        for (int j = 0; j < B; j++)
            idx.push_back((iter * B + j) % static_cast<int>(refs01.size()));
        Rng rng = derive_rng(seed, "tmpl", static_cast<uint64_t>(iter));
        std::vector<std::vector<int>> prompts;
        for (int j = 0; j < B; j++)
            prompts.push_back(templates[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(templates.size()) - 1))]);
        return {stack_to_model(refs01, idx), prompts};
    }
};

// Echo source: fresh one-step samples from a frozen snapshot of the student
// (and of the shared encoder) taken at stage start. Reads no reference files;
// prompts come from the same "tmpl" stream as ConceptProvider.
struct EchoProvider : BatchProvider {
    UNet snap_net;
    ConditioningEncoder snap_encoder;
    const NoiseSchedule* schedule;
    std::vector<std::vector<int>> templates;
    uint64_t seed;

    EchoProvider(const Workspace& ws, std::vector<std::vector<int>> templates_,
                 uint64_t s)
        : snap_net(ws.arch, derive_seed(s, "echo_snap_net")),
          snap_encoder(ws.arch, derive_seed(s, "echo_snap_enc")),
          schedule(&ws.bundle.schedule),
          templates(std::move(templates_)),
          seed(s) {
        snap_net.params.copy_from(ws.bundle.student.params);
        snap_encoder.params.copy_from(ws.bundle.encoder.params);
        for (auto* p : snap_net.params.all()) p->set_trainable(false);
        for (auto* p : snap_encoder.params.all()) p->set_trainable(false);
    }

    std::pair<Tensor, std::vector<std::vector<int>>> get(int iter, int B) override {
        Rng rng = derive_rng(seed, "tmpl", static_cast<uint64_t>(iter));
        std::vector<std::vector<int>> prompts;
        for (int j = 0; j < B; j++)
            prompts.push_back(templates[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(templates.size()) - 1))]);
        NoGradGuard ng;
        Rng rx = derive_rng(seed, "echo_xT", static_cast<uint64_t>(iter));
        Var x_T = Var::constant(detail::randn_batch(
            B, snap_net.arch.img_channels, snap_net.arch.img_size,
            snap_net.arch.img_size, rx));
        Var cond = snap_encoder.encode(prompts);
        Var x0 = generate_one_step(snap_net, *schedule, x_T, cond);
        return {x0.val(), prompts};
    }
};

// ---------------------------------------------------------------------------
// joint training loop (Algorithm-1 structure)
// ---------------------------------------------------------------------------

struct JointLoopOpts {
    bool train_teacher = true;        // sub-step (1) present
    ParamPolicy teacher_policy = ParamPolicy::kKvOnly;
    ParamPolicy encoder_policy = ParamPolicy::kEncoderConceptToken;
    ParamPolicy student_policy = ParamPolicy::kKvOnly;
    bool critics_enabled = true;      // adversarial losses + sub-step (3)
};

// One iteration = (1) teacher on L_rec, (2) student on L_align + L_GAN^G with
// stop-gradients on C and on the teacher target, (3) critic heads on L_GAN^D
// with the student output detached.
class JointTrainer {
public:
    // invoked after each sub-step (1,2,3) so tests can hash parameter state
    std::function<void(int substep)> audit_hook;

    JointTrainer(Workspace& ws, const TrainConfig& cfg, const JointLoopOpts& opts)
        : ws_(ws), cfg_(cfg), opts_(opts) {
        auto teacher_sel = select_trainable(ws.bundle.teacher.params, opts.teacher_policy);
        auto encoder_sel = select_trainable(ws.bundle.encoder.params, opts.encoder_policy);
        auto student_sel = select_trainable(ws.bundle.student.params, opts.student_policy);
        ws.bundle.embedder.freeze();
        ws.probe.freeze();
        ws.ensemble.freeze_backbones();
        for (auto& c : ws.ensemble.critics)
            for (auto* p : c.head_params.all()) p->set_trainable(true);

        std::vector<Param*> teacher_params = teacher_sel;
        teacher_params.insert(teacher_params.end(), encoder_sel.begin(),
                              encoder_sel.end());
        if (opts.train_teacher)
            opt_teacher_ = Adam(teacher_params, cfg.learning_rate);
        opt_student_ = Adam(student_sel, cfg.learning_rate);
        if (opts.critics_enabled)
            opt_critics_ = Adam(ws.ensemble.head_params(), cfg.learning_rate);
        lambda_eff_ = cfg.weights.lambda_k;
        lambda_eff_.resize(ws.ensemble.size(), 1.0);
        if (cfg.no_critics)
            std::fill(lambda_eff_.begin(), lambda_eff_.end(), 0.0);
    }

    IterRecord step(int iter, BatchProvider& provider) {
        auto t0 = std::chrono::steady_clock::now();
        const NoiseSchedule& sched = ws_.bundle.schedule;
        IterRecord rec;
        rec.iter = iter;
        LossCounters counters;

        // shared per-iteration draws
        Rng rt = derive_rng(cfg_.seed, "t", static_cast<uint64_t>(iter));
        int t = static_cast<int>(rt.uniform_int(1, sched.T));
        rec.t = t;
        rec.c_t = timestep_weight(t, sched);
        Rng reps = derive_rng(cfg_.seed, "eps", static_cast<uint64_t>(iter));
        auto [batch, prompts] = provider.get(iter, cfg_.batch_size);
        Var x0_r = Var::constant(batch);
        Var eps = Var::constant(detail::randn_batch(batch.dim(0), batch.dim(1),
                                                    batch.dim(2), batch.dim(3), reps));
        Var cond = ws_.bundle.encoder.encode(prompts);

        // ---- (1) teacher: L_rec on the real/echoed batch -----------------
        if (opts_.train_teacher && !cfg_.no_teacher) {
            Var x_t = forward_diffuse(x0_r, t, eps, sched);
            Var eps_hat = ws_.bundle.teacher(x_t, t, cond);
            Var l_rec = loss_rec(eps, eps_hat);
            rec.loss_rec = l_rec.val().item();
            detail::require_finite(rec.loss_rec, "loss_rec", iter);
            ws_.zero_all_grads();
            l_rec.backward();
            opt_teacher_.step();
        }
        if (audit_hook) audit_hook(1);

        // ---- (2) student: alignment + adversarial ------------------------
        Var cond_sg = cond.detach();
        Rng rxT = derive_rng(cfg_.seed, "xT", static_cast<uint64_t>(iter));
        Var x_T = Var::constant(detail::randn_batch(batch.dim(0), batch.dim(1),
                                                    batch.dim(2), batch.dim(3), rxT));
        Var x0_st = generate_one_step(ws_.bundle.student, sched, x_T, cond_sg);
        Var l_student = Var::constant(Tensor::scalar(0.0));
        if (!cfg_.no_teacher) {
            Var x0_tc;
            {
                NoGradGuard ng;
                Var x_t_st = forward_diffuse(x0_st.detach(), t, eps, sched);
                Var eh = ws_.bundle.teacher(x_t_st, t, cond_sg);
                x0_tc = predict_denoised(x_t_st, eh, t, sched, DenoisedMode::kStandard);
            }
            SwdConfig swd{cfg_.swd_scales, cfg_.swd_projections,
                          derive_seed(cfg_.seed, "swd", static_cast<uint64_t>(iter))};
            Var l_align = loss_align(x0_st, x0_tc, t, sched, cfg_.weights,
                                     ws_.bundle.embedder, swd, &counters);
            rec.loss_align = l_align.val().item();
            detail::require_finite(rec.loss_align, "loss_align", iter);
            l_student = ops::add(l_student, l_align);
        }
        if (opts_.critics_enabled && !cfg_.no_critics) {
            Var l_g = gan_generator_loss(score(ws_.ensemble, x0_st), lambda_eff_,
                                         &counters);
            rec.loss_gan_g = l_g.val().item();
            detail::require_finite(rec.loss_gan_g, "gan_generator_loss", iter);
            l_student = ops::add(l_student, l_g);
        }
        ws_.zero_all_grads();
        if (l_student.requires_grad()) l_student.backward();
        opt_student_.step();
        if (audit_hook) audit_hook(2);

        // ---- (3) critic heads on L_GAN^D, student output detached --------
        if (opts_.critics_enabled && !cfg_.no_critics) {
            Var fake = x0_st.detach();
            Var l_d = gan_discriminator_loss(score(ws_.ensemble, x0_r),
                                             score(ws_.ensemble, fake), &counters);
            rec.loss_gan_d = l_d.val().item();
            detail::require_finite(rec.loss_gan_d, "gan_discriminator_loss", iter);
            ws_.zero_all_grads();
            l_d.backward();
            opt_critics_.step();
        }
        if (audit_hook) audit_hook(3);

        rec.clamp_events = counters.clamp_events;
        rec.degenerate_norms = counters.degenerate_norms;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        return rec;
    }

private:
    Workspace& ws_;
    TrainConfig cfg_;
    JointLoopOpts opts_;
    Adam opt_teacher_, opt_student_, opt_critics_;
    std::vector<double> lambda_eff_;
};

inline StageResult run_joint_loop(Workspace& ws, const TrainConfig& cfg,
                                  const JointLoopOpts& opts, BatchProvider& provider,
                                  const HistorySink& sink) {
    auto t0 = std::chrono::steady_clock::now();
    JointTrainer trainer(ws, cfg, opts);
    StageResult res;
    for (int iter = 0; iter < cfg.iterations; iter++) {
        IterRecord rec = trainer.step(iter, provider);
        res.clamp_events += rec.clamp_events;
        res.degenerate_norms += rec.degenerate_norms;
        res.history.push_back(rec);
        if (sink) sink(rec);
    }
    res.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// ---------------------------------------------------------------------------
// pretraining (base backbone stand-ins)
// ---------------------------------------------------------------------------

namespace detail {

// train the given conv encoder as an autoencoder on the corpus, then leave
// the caller to freeze it
inline void train_autoencoder(ConvEncoder& enc, std::vector<Param*> enc_params,
                              const ArchConfig& arch, const Corpus& corpus,
                              const TrainConfig& cfg, const std::string& label) {
    ParamStore dec_store;
    Rng drng = derive_rng(cfg.seed, label + "_dec");
    // one upsample+conv per encoder stage (reversed widths), then conv_out
    std::vector<int> dec_widths;
    for (size_t i = enc.convs.size(); i-- > 1;)
        dec_widths.push_back(enc.convs[i - 1].w->value().shape()[0]);
    dec_widths.push_back(enc.convs[0].w->value().shape()[0]);
    ConvDecoder dec(dec_store, "dec", enc.out_channels, enc.out_hw, dec_widths,
                    arch.img_channels, drng);
    std::vector<Param*> all = enc_params;
    for (auto* p : dec_store.all()) all.push_back(p);
    Adam opt(all, cfg.aux_learning_rate);
    for (int iter = 0; iter < cfg.aux_iterations; iter++) {
        Rng rng = derive_rng(cfg.seed, label + "_batch", static_cast<uint64_t>(iter));
        std::vector<int> idx;
        for (int j = 0; j < cfg.aux_batch_size; j++)
            idx.push_back(static_cast<int>(
                rng.uniform_int(0, static_cast<int64_t>(corpus.size()) - 1)));
        Var x = Var::constant(stack_to_model(corpus.images, idx));
        Var recon = dec(enc(x));
        Var l = loss_mse(recon, x);
        require_finite(l.val().item(), label.c_str(), iter);
        for (auto* p : all) p->var.zero_grad();
        l.backward();
        opt.step();
    }
}

}  // namespace detail

// Stage 1: trains the base teacher (with the conditioning encoder) on the
// corpus, plus the frozen stand-ins: identity embedder, critic backbones and
// the evaluation probe. All of them are corpus-level artifacts.
inline StageResult pretrain_teacher(Workspace& ws, const Corpus& corpus,
                                    const TrainConfig& cfg, const HistorySink& sink) {
    check(corpus.size() > 0, "pretrain: empty corpus");
    auto t0 = std::chrono::steady_clock::now();
    StageResult res;
    if (cfg.iterations == 0) return res;  // checkpoint stays at initialization

    // (a) teacher + encoder, noise prediction objective
    select_trainable(ws.bundle.teacher.params, ParamPolicy::kAll);
    select_trainable(ws.bundle.encoder.params, ParamPolicy::kAll);
    std::vector<Param*> tp = ws.bundle.teacher.params.all();
    for (auto* p : ws.bundle.encoder.params.all()) tp.push_back(p);
    Adam opt(tp, cfg.learning_rate);
    const NoiseSchedule& sched = ws.bundle.schedule;
    double running = 0.0;
    int window = std::min(100, std::max(1, cfg.iterations));
    std::vector<double> last;
    for (int iter = 0; iter < cfg.iterations; iter++) {
        auto it0 = std::chrono::steady_clock::now();
        Rng rb = derive_rng(cfg.seed, "batch", static_cast<uint64_t>(iter));
        std::vector<int> idx;
        std::vector<std::vector<int>> prompts;
        for (int j = 0; j < cfg.batch_size; j++) {
            int i = static_cast<int>(
                rb.uniform_int(0, static_cast<int64_t>(corpus.size()) - 1));
            idx.push_back(i);
            prompts.push_back(corpus.prompts[static_cast<size_t>(i)]);
        }
        Var x0 = Var::constant(stack_to_model(corpus.images, idx));
        Rng rt = derive_rng(cfg.seed, "t", static_cast<uint64_t>(iter));
        int t = static_cast<int>(rt.uniform_int(1, sched.T));
        Rng re = derive_rng(cfg.seed, "eps", static_cast<uint64_t>(iter));
        Var eps = Var::constant(detail::randn_batch(
            x0.shape()[0], x0.shape()[1], x0.shape()[2], x0.shape()[3], re));
        Var cond = ws.bundle.encoder.encode(prompts);
        Var l = loss_rec(eps, ws.bundle.teacher(forward_diffuse(x0, t, eps, sched), t,
                                                cond));
        double lv = l.val().item();
        detail::require_finite(lv, "loss_rec", iter);
        ws.zero_all_grads();
        l.backward();
        opt.step();

        last.push_back(lv);
        if (static_cast<int>(last.size()) > window) last.erase(last.begin());
        running = 0.0;
        for (double v : last) running += v;
        running /= static_cast<double>(last.size());

        IterRecord rec;
        rec.iter = iter;
        rec.t = t;
        rec.c_t = timestep_weight(t, sched);
        rec.loss_rec = lv;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - it0)
                          .count();
        res.history.push_back(rec);
        if (sink) sink(rec);
    }
    res.final_metric = running;
    res.target_met = cfg.iterations == 0 || running < cfg.pretrain_target_loss;

    // (b) identity embedder autoencoder, then frozen
    detail::train_autoencoder(ws.bundle.embedder.enc, ws.bundle.embedder.params.all(),
                              ws.arch, corpus, cfg, "embedder_ae");
    ws.bundle.embedder.freeze();

    // (c) critic backbones as autoencoders, then frozen
    for (size_t k = 0; k < ws.ensemble.critics.size(); k++) {
        auto& crit = ws.ensemble.critics[k];
        detail::train_autoencoder(crit.backbone, crit.backbone_params.all(), ws.arch,
                                  corpus, cfg, "critic" + std::to_string(k) + "_ae");
        crit.freeze_backbone();
    }

    // (d) contrastive probe on paired (image, prompt) corpus data, then frozen
    {
        for (auto* p : ws.probe.params.all()) p->set_trainable(true);
        Adam popt(ws.probe.params.all(), cfg.aux_learning_rate);
        int B = cfg.aux_batch_size;
        Tensor eye({B, B});
        for (int i = 0; i < B; i++) eye[static_cast<size_t>(i) * B + i] = 1.0;
        Var eye_v = Var::constant(eye);
        for (int iter = 0; iter < cfg.aux_iterations; iter++) {
            Rng rng = derive_rng(cfg.seed, "probe_batch", static_cast<uint64_t>(iter));
            std::vector<int> idx;
            std::vector<std::vector<int>> prompts;
            for (int j = 0; j < B; j++) {
                int i = static_cast<int>(
                    rng.uniform_int(0, static_cast<int64_t>(corpus.size()) - 1));
                idx.push_back(i);
                prompts.push_back(corpus.prompts[static_cast<size_t>(i)]);
            }
            Var ie = ws.probe.embed_images(Var::constant(stack_to_model(corpus.images, idx)));
            Var te = ws.probe.embed_prompts(prompts);
            Var logits = ops::mul_scalar(
                ops::reshape_v(ops::bmm_nt(ops::reshape_v(ie, {1, B, ws.probe.out_dim}),
                                           ops::reshape_v(te, {1, B, ws.probe.out_dim})),
                               {B, B}),
                1.0 / 0.1);
            auto nce = [&](const Var& lg) {
                Var lp = ops::log_v(ops::softmax_last(lg));
                return ops::neg(ops::mean_all(ops::sum_last(ops::mul(lp, eye_v))));
            };
            Var lt = ops::reshape_v(
                ops::bmm_nt(ops::reshape_v(te, {1, B, ws.probe.out_dim}),
                            ops::reshape_v(ie, {1, B, ws.probe.out_dim})),
                {B, B});
            Var l = ops::mul_scalar(
                ops::add(nce(logits), nce(ops::mul_scalar(lt, 1.0 / 0.1))), 0.5);
            detail::require_finite(l.val().item(), "probe_nce", iter);
            ws.zero_all_grads();
            l.backward();
            popt.step();
        }
        ws.probe.freeze();
    }

    res.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!res.target_met)
        throw DivergenceError(
            "pretrain: running reconstruction loss " + std::to_string(running) +
            " did not reach target " + std::to_string(cfg.pretrain_target_loss));
    return res;
}

// Stage 2: initialize the student from the teacher weights and distill it on
// the concept-agnostic corpus with the alignment + adversarial objectives.
// The teacher and the shared encoder stay frozen here.
inline StageResult distill_base_student(Workspace& ws, const Corpus& corpus,
                                        const TrainConfig& cfg,
                                        const HistorySink& sink) {
    check(corpus.size() > 0, "distill-base: empty corpus");
    ws.bundle.student.params.copy_from(ws.bundle.teacher.params);

    JointLoopOpts opts;
    opts.train_teacher = false;  // teacher is the frozen pretrained base
    opts.teacher_policy = ParamPolicy::kNone;
    opts.encoder_policy = ParamPolicy::kNone;
    opts.student_policy = ParamPolicy::kAll;
    opts.critics_enabled = true;
    CorpusProvider provider(corpus, cfg.seed);
    StageResult res = run_joint_loop(ws, cfg, opts, provider, sink);

    // post metric: one-step samples against corpus images
    {
        NoGradGuard ng;
        int n = std::min<int>(32, static_cast<int>(corpus.size()));
        std::vector<std::vector<int>> prompts;
        std::vector<int> idx;
        for (int i = 0; i < n; i++) {
            idx.push_back(i);
            prompts.push_back(corpus.prompts[static_cast<size_t>(i)]);
        }
        Var cond = ws.bundle.encoder.encode(prompts);
        Tensor samples = sample_student(ws.bundle.student, ws.bundle.schedule, cond,
                                        derive_seed(cfg.seed, "base_eval"));
        Tensor s01(samples.shape());
        for (size_t i = 0; i < samples.size(); i++)
            s01[i] = std::min(1.0, std::max(0.0, (samples[i] + 1.0) * 0.5));
        Tensor refs = stack_to_model(corpus.images, idx);
        Tensor r01(refs.shape());
        for (size_t i = 0; i < refs.size(); i++)
            r01[i] = std::min(1.0, std::max(0.0, (refs[i] + 1.0) * 0.5));
        SwdConfig swd{3, 64, derive_seed(cfg.seed, "base_eval_swd")};
        res.final_metric =
            ms_swd(Var::constant(s01), Var::constant(r01), swd).val().item();
        res.target_met = cfg.iterations == 0 || res.final_metric < cfg.base_swd_threshold;
    }
    return res;
}

// Stage 3: the joint personalization loop on a few-shot concept.
inline StageResult run_distillation_stage(Workspace& ws, const ConceptSet& concept_set,
                                          const TrainConfig& cfg,
                                          const HistorySink& sink) {
    check(!concept_set.references.empty(), "personalize: concept has no references");
    JointLoopOpts opts;  // defaults: Algorithm-1 policies
    opts.train_teacher = !cfg.no_teacher;
    ConceptProvider provider(concept_set, cfg.seed);
    return run_joint_loop(ws, cfg, opts, provider, sink);
}

// Stage 4: identical loop, but x0_r comes from a frozen snapshot of the
// post-distillation student. Loss formulas and optimizer settings carry over.
inline StageResult run_echo_stage(Workspace& ws,
                                  const std::vector<std::vector<int>>& templates,
                                  const TrainConfig& cfg, const HistorySink& sink) {
    check(!templates.empty(), "echo: no prompt templates recorded in checkpoint");
    JointLoopOpts opts;
    opts.train_teacher = !cfg.no_teacher;
    EchoProvider provider(ws, templates, cfg.seed);
    return run_joint_loop(ws, cfg, opts, provider, sink);
}

}  // namespace echolab
