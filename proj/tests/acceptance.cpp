// Acceptance suite: one pass/fail line per criterion.
// argv[1] (optional): path to the echolab CLI binary, used by the
// reproducibility criterion; argv[2] (optional): scratch directory.

#include <chrono>
#include <cstdio>
#include <sstream>

#include "echolab/config.hpp"
#include "echolab/engine.hpp"
#include "echolab/evalkit.hpp"

using namespace echolab;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
    int id;
    bool pass = true;
    std::string detail;
    double seconds = 0.0;
};

std::vector<Criterion> g_results;

template <class F>
void run_criterion(int id, const std::string& label, F body) {
    Criterion c;
    c.id = id;
    auto t0 = Clock::now();
    try {
        body(c);
    } catch (const std::exception& e) {
        c.pass = false;
        c.detail += std::string(" exception: ") + e.what();
    }
    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("[%s] criterion %d (%.1fs): %s —%s\n", c.pass ? "PASS" : "FAIL", id,
                c.seconds, label.c_str(), c.detail.empty() ? " ok" : c.detail.c_str());
    std::fflush(stdout);
    g_results.push_back(c);
}

#define REQUIRE(c, cond, msg)                              \
    do {                                                   \
        if (!(cond)) {                                     \
            (c).pass = false;                              \
            (c).detail += std::string(" [") + (msg) + "]"; \
        }                                                  \
    } while (0)

// ---------------------------------------------------------------------------
// pipeline configuration (toy scale, full-size 32x32 models)
// ---------------------------------------------------------------------------

constexpr int kScheduleT = 200;
constexpr double kBetaStart = 1e-3, kBetaEnd = 0.05;
constexpr int kCorpusSize = 4096;
constexpr uint64_t kCorpusSeed = 100;
constexpr int kNumConcepts = 3;

TrainConfig pretrain_config() {
    TrainConfig c;
    c.stage = Stage::kPretrain;
    c.iterations = 2500;
    c.batch_size = 16;
    c.learning_rate = 1e-3;
    c.seed = 1;
    c.schedule_T = kScheduleT;
    c.beta_start = kBetaStart;
    c.beta_end = kBetaEnd;
    c.aux_iterations = 800;
    c.aux_batch_size = 16;
    c.aux_learning_rate = 1e-3;
    c.pretrain_target_loss = 0.55;
    return c;
}

TrainConfig base_config() {
    TrainConfig c;
    c.stage = Stage::kDistillBase;
    c.iterations = 1500;
    c.batch_size = 4;
    c.learning_rate = 2e-4;
    c.seed = 2;
    c.base_swd_threshold = 0.05;
    return c;
}

TrainConfig personalize_config(uint64_t seed) {
    TrainConfig c;
    c.stage = Stage::kPersonalize;
    c.iterations = 1000;  // distillation-stage iteration count
    c.batch_size = 2;
    c.learning_rate = 1e-3;  // toy-scale calibration (see run configs)
    c.seed = seed;
    return c;
}

TrainConfig echo_config(uint64_t seed) {
    TrainConfig c = personalize_config(seed);
    c.stage = Stage::kEcho;
    c.iterations = 500;
    return c;
}

// ---------------------------------------------------------------------------
// metric helpers (fixed evaluation seeds, paired across checkpoints)
// ---------------------------------------------------------------------------

constexpr uint64_t kEvalSeed = 4242;
constexpr int kEvalSamples = 64;
constexpr int kEvalBatch = 16;

std::vector<std::vector<int>> eval_prompts(const ConceptSet& cs, int start, int n) {
    std::vector<std::vector<int>> prompts;
    for (int j = 0; j < n; j++)
        prompts.push_back(cs.templates[(start + j) % cs.templates.size()]);
    return prompts;
}

template <class SamplerFn>
Tensor draw_samples(const Workspace& ws, const ConceptSet& cs, const std::string& tag,
                    SamplerFn sampler) {
    NoGradGuard ng;
    Tensor all({kEvalSamples, ws.arch.img_channels, ws.arch.img_size, ws.arch.img_size});
    int done = 0, chunk = 0;
    size_t per_image =
        static_cast<size_t>(ws.arch.img_channels) * ws.arch.img_size * ws.arch.img_size;
    while (done < kEvalSamples) {
        int B = std::min(kEvalBatch, kEvalSamples - done);
        auto prompts = eval_prompts(cs, done, B);
        Var cond = ws.bundle.encoder.encode(prompts);
        uint64_t seed = derive_seed(derive_seed(kEvalSeed, cs.concept_id), tag,
                                    static_cast<uint64_t>(chunk));
        Tensor batch = sampler(cond, seed);
        std::copy_n(batch.data(), batch.size(),
                    all.data() + static_cast<size_t>(done) * per_image);
        done += B;
        chunk++;
    }
    return all;
}

Tensor student_samples(const Workspace& ws, const ConceptSet& cs, int nfe) {
    return draw_samples(ws, cs, "student_nfe" + std::to_string(nfe),
                        [&](const Var& cond, uint64_t seed) {
                            return sample_few_step(ws.bundle.student,
                                                   ws.bundle.schedule, cond, nfe, seed);
                        });
}

Tensor teacher_samples(const Workspace& ws, const ConceptSet& cs, int steps) {
    return draw_samples(ws, cs, "teacher", [&](const Var& cond, uint64_t seed) {
        return sample_teacher(ws.bundle.teacher, ws.bundle.schedule, cond, steps, seed);
    });
}

Tensor refs_model(const ConceptSet& cs) {
    std::vector<int> idx(cs.references.size());
    for (size_t i = 0; i < idx.size(); i++) idx[i] = static_cast<int>(i);
    return stack_to_model(cs.references, idx);
}

Tensor to_unit(const Tensor& m) {
    Tensor out(m.shape());
    for (size_t i = 0; i < m.size(); i++)
        out[i] = std::min(1.0, std::max(0.0, (m[i] + 1.0) * 0.5));
    return out;
}

double similarity_of(const Workspace& ws, const ConceptSet& cs, const Tensor& samples) {
    return proxy_image_similarity(samples, refs_model(cs), ws.bundle.embedder);
}

double distance_of(const ConceptSet& cs, const Tensor& samples) {
    return distribution_distance(to_unit(samples), to_unit(refs_model(cs)), kEvalSeed);
}

// central differences at the criterion's pinned step size
template <class F>
double acceptance_grad_error(Var& leaf, F loss_fn) {
    const double h = 1e-4;
    Var loss = loss_fn();
    loss.backward();
    Tensor analytic = leaf.grad().clone();
    double worst = 0.0;
    for (size_t i = 0; i < leaf.val().size(); i++) {
        double orig = leaf.val()[i];
        leaf.mutable_val()[i] = orig + h;
        double fp = loss_fn().val().item();
        leaf.mutable_val()[i] = orig - h;
        double fm = loss_fn().val().item();
        leaf.mutable_val()[i] = orig;
        double fd = (fp - fm) / (2 * h);
        double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-8});
        worst = std::max(worst, std::fabs(fd - analytic[i]) / denom);
    }
    leaf.zero_grad();
    return worst;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    std::string cli_bin = argc > 1 ? argv[1] : "";
    std::string scratch =
        argc > 2 ? argv[2] : (fs::temp_directory_path() / "echolab_acceptance").string();
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    // ---- criterion 1: schedule & process invariants ------------------------
    run_criterion(1, "schedule & process invariants", [&](Criterion& c) {
        for (auto [T, b0, b1] : std::vector<std::tuple<int, double, double>>{
                 {1000, 1e-4, 0.02}, {kScheduleT, kBetaStart, kBetaEnd}}) {
            auto s = make_schedule(T, b0, b1);
            double worst_vp = 0.0;
            for (int t = 1; t <= T; t++)
                worst_vp = std::max(
                    worst_vp, std::fabs(s.alpha_at(t) * s.alpha_at(t) +
                                        s.sigma_at(t) * s.sigma_at(t) - 1.0));
            REQUIRE(c, worst_vp < 1e-10, "variance preservation " + fmt(worst_vp));
            for (int t = 2; t <= T; t++)
                REQUIRE(c, timestep_weight(t, s) < timestep_weight(t - 1, s),
                        "c(t) not strictly decreasing");
            Rng rng(1);
            Var x0 = Var::constant(Tensor::randn({2, 3, 8, 8}, rng));
            for (int t : {1, T / 2 + 1, T}) {
                Var eps = Var::constant(Tensor::randn({2, 3, 8, 8}, rng));
                Var xt = forward_diffuse(x0, t, eps, s);
                Tensor rec = predict_denoised(xt, eps, t, s).val();
                REQUIRE(c, max_abs_diff(rec, x0.val()) < 1e-6, "inversion identity");
            }
        }
    });

    // ---- criterion 2: loss unit suite ---------------------------------------
    run_criterion(2, "loss unit suite (exact values + scalar oracles)",
                  [&](Criterion& c) {
        Rng rng(2);
        Var x = Var::constant(Tensor::randn({2, 1, 4, 4}, rng));
        REQUIRE(c, loss_rec(x, x).val().item() == 0.0, "L_rec zero at identity");
        REQUIRE(c, loss_mse(x, x).val().item() == 0.0, "L_mse zero at identity");
        SwdConfig swd1{1, 1, 5};
        REQUIRE(c, std::fabs(ms_swd(x, x, swd1).val().item()) < 1e-12,
                "L_swd zero at identity");
        Var shifted = ops::add_scalar(x, 0.5);
        REQUIRE(c, std::fabs(loss_mse(x, shifted).val().item() - 0.25) < 1e-12,
                "constant shift 0.25");
        Var u = Var::constant(Tensor::from({1, 2}, {1, 0}));
        Var v = Var::constant(Tensor::from({1, 2}, {0, 1}));
        Var w = Var::constant(Tensor::from({1, 2}, {0.3, -0.4}));
        REQUIRE(c, std::fabs(loss_id_from_features(u, u).val().item()) < 1e-9,
                "cos identical -> 0");
        REQUIRE(c, std::fabs(loss_id_from_features(u, v).val().item() - 1.0) < 1e-9,
                "cos orthogonal -> 1");
        REQUIRE(c,
                std::fabs(loss_id_from_features(w, ops::neg(w)).val().item() - 2.0) <
                    1e-9,
                "cos opposite -> 2");
        auto half = Var::constant(Tensor::full({2, 1}, 0.5));
        std::vector<Var> halves = {half, half, half};
        REQUIRE(c,
                std::fabs(gan_generator_loss(halves, {1, 1, 1}).val().item() -
                          3.0 * std::log(2.0)) < 1e-12,
                "3 ln 2");
        REQUIRE(c,
                std::fabs(gan_discriminator_loss(halves, halves).val().item() -
                          6.0 * std::log(2.0)) < 1e-12,
                "6 ln 2");
        Tensor a = Tensor::randn({2, 1, 4, 4}, rng), b = Tensor::randn({2, 1, 4, 4}, rng);
        double mse_ref = 0;
        for (size_t i = 0; i < a.size(); i++) mse_ref += (a[i] - b[i]) * (a[i] - b[i]);
        mse_ref /= static_cast<double>(a.size());
        REQUIRE(c,
                std::fabs(loss_rec(Var::constant(a), Var::constant(b)).val().item() -
                          mse_ref) < 1e-6,
                "elementwise loop oracle");
        std::vector<Var> sc = {Var::constant(Tensor::full({1, 1}, 0.9)),
                               Var::constant(Tensor::full({1, 1}, 0.5)),
                               Var::constant(Tensor::full({1, 1}, 0.1))};
        REQUIRE(c,
                std::fabs(gan_generator_loss(sc, {1, 1, 1}).val().item() +
                          (std::log(0.9) + std::log(0.5) + std::log(0.1))) < 1e-6,
                "log-sum oracle");
        REQUIRE(c,
                std::fabs(gan_discriminator_loss(
                              {Var::constant(Tensor::full({1, 1}, 0.8))},
                              {Var::constant(Tensor::full({1, 1}, 0.3))})
                              .val()
                              .item() +
                          (std::log(0.8) + std::log(0.7))) < 1e-6,
                "real 0.8 / fake 0.3 oracle");
    });

    // ---- criterion 3: gradient suite ----------------------------------------
    run_criterion(3, "gradient suite vs central differences (h=1e-4)",
                  [&](Criterion& c) {
        Rng rng(3);
        ArchConfig tiny;
        tiny.img_channels = 2;
        tiny.img_size = 4;
        tiny.embedder_widths = {4};
        IdentityEmbedder emb(tiny, 99);
        auto sched = make_schedule(64, 1e-3, 0.05);
        LossWeights wts;
        SwdConfig swd{2, 4, 21};
        const double tol = 1e-3;

        Var x = Var::leaf(Tensor::randn({1, 2, 4, 4}, rng), true);  // 32 elements
        Var tgt = Var::constant(Tensor::randn({1, 2, 4, 4}, rng));
        auto check_one = [&](const char* name, auto fn) {
            double err = acceptance_grad_error(x, fn);
            REQUIRE(c, err < tol, std::string(name) + " rel err " + fmt(err));
        };
        check_one("L_rec", [&] { x.zero_grad(); return loss_rec(tgt, x); });
        check_one("L_mse", [&] { x.zero_grad(); return loss_mse(x, tgt); });
        check_one("L_id", [&] { x.zero_grad(); return loss_id(x, tgt, emb); });
        check_one("L_swd", [&] { x.zero_grad(); return ms_swd(x, tgt, swd); });
        check_one("L_align", [&] {
            x.zero_grad();
            return loss_align(x, tgt, 17, sched, wts, emb, swd);
        });
        {
            Var s1 = Var::leaf(Tensor::from({2, 1}, {0.6, 0.3}), true);
            Var s2 = Var::constant(Tensor::from({2, 1}, {0.8, 0.2}));
            auto f = [&] {
                s1.zero_grad();
                return gan_generator_loss({s1, s2}, {1.0, 0.5});
            };
            double err = acceptance_grad_error(s1, f);
            REQUIRE(c, err < tol, "L_GAN^G rel err " + fmt(err));
        }
        {
            Var r = Var::leaf(Tensor::from({2, 1}, {0.7, 0.9}), true);
            Var fk = Var::leaf(Tensor::from({2, 1}, {0.4, 0.1}), true);
            auto f1 = [&] {
                r.zero_grad();
                fk.zero_grad();
                return gan_discriminator_loss({r}, {fk});
            };
            double e1 = acceptance_grad_error(r, f1);
            double e2 = acceptance_grad_error(fk, f1);
            REQUIRE(c, e1 < tol && e2 < tol, "L_GAN^D rel err " + fmt(std::max(e1, e2)));
        }
    });

    // ---- criterion 4: MS-SWD oracle ------------------------------------------
    run_criterion(4, "MS-SWD vs sorted-difference oracle + invariances",
                  [&](Criterion& c) {
        Rng rng(4);
        auto w2_ref = [](std::vector<double> xs, std::vector<double> ys) {
            std::sort(xs.begin(), xs.end());
            std::sort(ys.begin(), ys.end());
            double acc = 0;
            for (size_t i = 0; i < xs.size(); i++)
                acc += (xs[i] - ys[i]) * (xs[i] - ys[i]);
            return acc / static_cast<double>(xs.size());
        };
        double worst = 0.0;
        for (int rep = 0; rep < 100; rep++) {
            Tensor x = Tensor::randn({1, 1, 4, 4}, rng);
            Tensor y = Tensor::randn({1, 1, 4, 4}, rng);
            SwdConfig cfg{1, 1, static_cast<uint64_t>(rep)};
            double got = ms_swd(Var::constant(x), Var::constant(y), cfg).val().item();
            std::vector<double> xv(x.data(), x.data() + x.size());
            std::vector<double> yv(y.data(), y.data() + y.size());
            worst = std::max(worst, std::fabs(got - w2_ref(xv, yv)));
        }
        REQUIRE(c, worst < 1e-6, "1-D W2 oracle worst " + fmt(worst));

        for (int rep = 0; rep < 100; rep++) {
            Tensor x = Tensor::randn({1, 3, 8, 8}, rng);
            Tensor y = Tensor::randn({1, 3, 8, 8}, rng);
            SwdConfig cfg{2, 4, static_cast<uint64_t>(500 + rep)};
            double a = ms_swd(Var::constant(x), Var::constant(y), cfg).val().item();
            double b = ms_swd(Var::constant(y), Var::constant(x), cfg).val().item();
            REQUIRE(c, std::fabs(a - b) < 1e-12, "symmetry");
            SwdConfig cfg1{1, 4, static_cast<uint64_t>(900 + rep)};
            double a1 = ms_swd(Var::constant(x), Var::constant(y), cfg1).val().item();
            Tensor xp = x.clone();
            Rng prng(static_cast<uint64_t>(rep));
            int HW = 64;
            std::vector<int> perm(HW);
            for (int i = 0; i < HW; i++) perm[i] = i;
            for (int i = HW - 1; i > 0; i--)
                std::swap(perm[i], perm[prng.uniform_int(0, i)]);
            for (int ch = 0; ch < 3; ch++)
                for (int i = 0; i < HW; i++)
                    xp[static_cast<size_t>(ch) * HW + i] =
                        x[static_cast<size_t>(ch) * HW + perm[i]];
            double a2 = ms_swd(Var::constant(xp), Var::constant(y), cfg1).val().item();
            REQUIRE(c, std::fabs(a1 - a2) < 1e-9, "permutation invariance");
        }
    });

    // ---- shared pipeline artifacts for criteria 5-9 --------------------------
    std::printf("... building pipeline artifacts (pretrain + base distillation)\n");
    std::fflush(stdout);
    ArchConfig arch;  // full-size toy architecture
    ToySpec spec;
    Corpus corpus = generate_corpus(spec, kCorpusSize, kCorpusSeed);
    std::vector<ConceptSet> concepts;
    for (int k = 0; k < kNumConcepts; k++)
        concepts.push_back(
            make_concept(spec, spec.held_out[static_cast<size_t>(k)], 101 + k, 4));

    Workspace base_ws(arch, make_schedule(kScheduleT, kBetaStart, kBetaEnd), 7);
    {
        auto t0 = Clock::now();
        StageResult pre_res = pretrain_teacher(base_ws, corpus, pretrain_config(), nullptr);
        StageResult base_res = distill_base_student(base_ws, corpus, base_config(), nullptr);
        std::printf("... pretrain L_rec(run)=%.4f base SWD=%.4f (%.0fs)\n",
                    pre_res.final_metric, base_res.final_metric,
                    std::chrono::duration<double>(Clock::now() - t0).count());
        std::fflush(stdout);
    }
    std::string base_dir = scratch + "/base";
    save_checkpoint(base_dir, base_ws.bundle, base_ws.ensemble, base_ws.probe,
                    ordered_json{{"stage", "distill-base"}, {"seed", 7}});

    // ---- criterion 5: Algorithm-1 scoping audit -------------------------------
    run_criterion(5, "Algorithm-1 update-scoping audit", [&](Criterion& c) {
        Checkpoint ck = load_checkpoint(base_dir);
        Workspace ws = Workspace::from_checkpoint(std::move(ck));
        TrainConfig cfg = personalize_config(900);
        JointLoopOpts opts;
        JointTrainer trainer(ws, cfg, opts);
        ConceptProvider provider(concepts[0], cfg.seed);

        auto hash_kv = [&](ParamStore& ps, bool kv) {
            uint64_t h = 0xcbf29ce484222325ull;
            for (auto* p : ps.all()) {
                if (is_kv_param(p->name) != kv) continue;
                h = fnv1a(p->value().data(), p->value().size() * sizeof(double), h);
            }
            return h;
        };
        struct Snap {
            uint64_t t_kv, t_rest, s_kv, s_rest, tok, enc_rest, heads;
        };
        auto snap = [&]() {
            Snap s;
            s.t_kv = hash_kv(ws.bundle.teacher.params, true);
            s.t_rest = hash_kv(ws.bundle.teacher.params, false);
            s.s_kv = hash_kv(ws.bundle.student.params, true);
            s.s_rest = hash_kv(ws.bundle.student.params, false);
            s.tok = ws.bundle.encoder.concept_token->value().content_hash();
            uint64_t h = 0xcbf29ce484222325ull;
            for (auto* p : ws.bundle.encoder.params.all())
                if (p->name != "concept_token")
                    h = fnv1a(p->value().data(), p->value().size() * sizeof(double), h);
            s.enc_rest = h;
            s.heads = ws.ensemble.heads_hash();
            return s;
        };
        Snap before = snap();
        std::vector<Snap> at(4, before);
        bool encoder_grad_zero = true;
        trainer.audit_hook = [&](int sub) {
            at[static_cast<size_t>(sub)] = snap();
            if (sub == 2) {
                for (auto* p : ws.bundle.encoder.params.all()) {
                    if (!p->var.has_grad()) continue;
                    for (size_t i = 0; i < p->var.grad().size(); i++)
                        if (p->var.grad()[i] != 0.0) encoder_grad_zero = false;
                }
            }
        };
        trainer.step(0, provider);
        REQUIRE(c, at[1].t_kv != before.t_kv, "step1 teacher K/V changed");
        REQUIRE(c, at[1].tok != before.tok, "step1 concept token changed");
        REQUIRE(c, at[1].t_rest == before.t_rest, "step1 teacher rest frozen");
        REQUIRE(c, at[1].enc_rest == before.enc_rest, "step1 encoder rest frozen");
        REQUIRE(c, at[1].s_kv == before.s_kv && at[1].s_rest == before.s_rest,
                "step1 student untouched");
        REQUIRE(c, at[1].heads == before.heads, "step1 heads untouched");
        REQUIRE(c, at[2].s_kv != at[1].s_kv, "step2 student K/V changed");
        REQUIRE(c, at[2].s_rest == at[1].s_rest, "step2 student rest frozen");
        REQUIRE(c, at[2].t_kv == at[1].t_kv && at[2].tok == at[1].tok,
                "step2 teacher/encoder untouched");
        REQUIRE(c, at[2].heads == at[1].heads, "step2 heads untouched");
        REQUIRE(c, at[3].heads != at[2].heads, "step3 heads changed");
        REQUIRE(c, at[3].s_kv == at[2].s_kv && at[3].t_kv == at[2].t_kv,
                "step3 models untouched");
        REQUIRE(c, encoder_grad_zero, "stopgrad(C): encoder grads zero in step 2");
    });

    // ---- criteria 6-9: personalization, ablations, echo, few-step ------------
    struct ConceptOutcome {
        std::string id;
        double pre_sim = 0, post_sim = 0;
        double pre_dist = 0, post_dist = 0;
        double nt_sim = 0, nc_sim = 0;
        double teacher_sim_before = 0, teacher_sim_after = 0;
        double sim_nfe1 = 0, sim_nfe2 = 0, sim_nfe4 = 0;
        bool nfe1_bitwise = false;
        double personalize_seconds = 0;
    };
    std::vector<ConceptOutcome> outcomes;
    std::vector<std::string> pers_dirs;

    for (int k = 0; k < kNumConcepts; k++) {
        const ConceptSet& cs = concepts[static_cast<size_t>(k)];
        ConceptOutcome out;
        out.id = cs.concept_id;
        uint64_t seed = 300 + static_cast<uint64_t>(k);

        {  // pre-personalization metrics on the base student
            Checkpoint ck = load_checkpoint(base_dir);
            Workspace ws = Workspace::from_checkpoint(std::move(ck));
            Tensor pre = student_samples(ws, cs, 1);
            out.pre_sim = similarity_of(ws, cs, pre);
            out.pre_dist = distance_of(cs, pre);
        }
        {  // full personalization
            Checkpoint ck = load_checkpoint(base_dir);
            Workspace ws = Workspace::from_checkpoint(std::move(ck));
            auto t0 = Clock::now();
            run_distillation_stage(ws, cs, personalize_config(seed), nullptr);
            out.personalize_seconds =
                std::chrono::duration<double>(Clock::now() - t0).count();
            std::string dir = scratch + "/pers-" + std::to_string(k);
            ordered_json tj = ordered_json::array();
            for (const auto& t : cs.templates)
                tj.push_back(ordered_json{{"tokens", t}, {"text", detokenize(t)}});
            save_checkpoint(dir, ws.bundle, ws.ensemble, ws.probe,
                            ordered_json{{"stage", "personalize"},
                                         {"seed", seed},
                                         {"concept",
                                          ordered_json{{"concept_id", cs.concept_id},
                                                       {"templates", tj}}}});
            pers_dirs.push_back(dir);
            Tensor post1 = student_samples(ws, cs, 1);
            out.post_sim = out.sim_nfe1 = similarity_of(ws, cs, post1);
            out.post_dist = distance_of(cs, post1);
            out.sim_nfe2 = similarity_of(ws, cs, student_samples(ws, cs, 2));
            out.sim_nfe4 = similarity_of(ws, cs, student_samples(ws, cs, 4));
            auto prompts = eval_prompts(cs, 0, 4);
            NoGradGuard ng;
            Var cond = ws.bundle.encoder.encode(prompts);
            Tensor a = sample_student(ws.bundle.student, ws.bundle.schedule, cond, 777);
            Tensor b =
                sample_few_step(ws.bundle.student, ws.bundle.schedule, cond, 1, 777);
            out.nfe1_bitwise = tensors_equal(a, b);
            out.teacher_sim_before = similarity_of(ws, cs, teacher_samples(ws, cs, 25));
        }
        {  // ablation: no teacher
            Checkpoint ck = load_checkpoint(base_dir);
            Workspace ws = Workspace::from_checkpoint(std::move(ck));
            TrainConfig cfg = personalize_config(seed);
            cfg.no_teacher = true;
            run_distillation_stage(ws, cs, cfg, nullptr);
            out.nt_sim = similarity_of(ws, cs, student_samples(ws, cs, 1));
        }
        {  // ablation: no critics
            Checkpoint ck = load_checkpoint(base_dir);
            Workspace ws = Workspace::from_checkpoint(std::move(ck));
            TrainConfig cfg = personalize_config(seed);
            cfg.no_critics = true;
            run_distillation_stage(ws, cs, cfg, nullptr);
            out.nc_sim = similarity_of(ws, cs, student_samples(ws, cs, 1));
        }
        {  // echo stage on top of the personalized checkpoint
            Checkpoint ck = load_checkpoint(pers_dirs.back());
            Workspace ws = Workspace::from_checkpoint(std::move(ck));
            run_echo_stage(ws, cs.templates, echo_config(seed + 50), nullptr);
            out.teacher_sim_after = similarity_of(ws, cs, teacher_samples(ws, cs, 25));
        }
        std::printf(
            "... %s: sim %.4f->%.4f dist %.4f->%.4f | nt %.4f nc %.4f | teacher "
            "%.4f->%.4f | nfe(1,2,4)=(%.4f,%.4f,%.4f) | %.0fs\n",
            out.id.c_str(), out.pre_sim, out.post_sim, out.pre_dist, out.post_dist,
            out.nt_sim, out.nc_sim, out.teacher_sim_before, out.teacher_sim_after,
            out.sim_nfe1, out.sim_nfe2, out.sim_nfe4, out.personalize_seconds);
        std::fflush(stdout);
        outcomes.push_back(out);
    }

    run_criterion(6, "toy personalization end-to-end (3 held-out concepts)",
                  [&](Criterion& c) {
                      for (const auto& o : outcomes) {
                          REQUIRE(c, o.post_sim > o.pre_sim,
                                  o.id + " similarity " + fmt(o.pre_sim) + "->" +
                                      fmt(o.post_sim));
                          REQUIRE(c, o.post_dist <= 0.5 * o.pre_dist,
                                  o.id + " distance " + fmt(o.pre_dist) + "->" +
                                      fmt(o.post_dist));
                          REQUIRE(c, o.personalize_seconds < 1800.0,
                                  o.id + " budget " + fmt(o.personalize_seconds) + "s");
                      }
                  });

    run_criterion(7, "component ablations directionally below full model",
                  [&](Criterion& c) {
                      for (const auto& o : outcomes) {
                          REQUIRE(c, o.nt_sim < o.post_sim,
                                  o.id + " no_teacher " + fmt(o.nt_sim) + " !< " +
                                      fmt(o.post_sim));
                          REQUIRE(c, o.nc_sim < o.post_sim,
                                  o.id + " no_critics " + fmt(o.nc_sim) + " !< " +
                                      fmt(o.post_sim));
                      }
                  });

    run_criterion(8, "echo stage improves the teacher", [&](Criterion& c) {
        int increases = 0;
        for (const auto& o : outcomes) {
            REQUIRE(c, o.teacher_sim_after >= o.teacher_sim_before - 1e-12,
                    o.id + " teacher sim decreased " + fmt(o.teacher_sim_before) +
                        "->" + fmt(o.teacher_sim_after));
            if (o.teacher_sim_after > o.teacher_sim_before) increases++;
        }
        REQUIRE(c, increases >= 2,
                "teacher sim increased on only " + std::to_string(increases) + "/3");
    });

    run_criterion(9, "few-step inference stays consistent", [&](Criterion& c) {
        for (const auto& o : outcomes) {
            REQUIRE(c, o.nfe1_bitwise, o.id + " nfe=1 not bitwise equal");
            double lo = std::min({o.sim_nfe1, o.sim_nfe2, o.sim_nfe4});
            double hi = std::max({o.sim_nfe1, o.sim_nfe2, o.sim_nfe4});
            REQUIRE(c, hi - lo < 0.05, o.id + " similarity spread " + fmt(hi - lo));
        }
    });

    // ---- criterion 10: reproducibility over the CLI pipeline ------------------
    run_criterion(10, "full pipeline re-run reproduces hashes and report bytes",
                  [&](Criterion& c) {
        if (cli_bin.empty()) {
            REQUIRE(c, false, "no CLI binary path provided");
            return;
        }
        std::string cfg_path = scratch + "/repro.json";
        std::ofstream(cfg_path) << R"({
  "schedule": {"T": 40, "beta_start": 0.001, "beta_end": 0.05},
  "stages": {
    "pretrain": {"iterations": 30, "batch_size": 8, "learning_rate": 0.001,
                  "seed": 11, "aux_iterations": 20, "aux_batch_size": 8,
                  "target_loss": 100.0},
    "distill-base": {"iterations": 20, "batch_size": 4, "learning_rate": 0.0002,
                      "seed": 12, "swd_threshold": 100.0},
    "personalize": {"iterations": 20, "batch_size": 2, "learning_rate": 0.001,
                     "seed": 13},
    "echo": {"iterations": 10, "batch_size": 2, "learning_rate": 0.001, "seed": 14}
  },
  "eval": {"samples_per_cell": 8, "teacher_steps": 5, "seed": 15}
})";
        auto shell = [&](const std::string& args) {
            std::string cmd = cli_bin + " " + args + " >/dev/null 2>&1";
            return WEXITSTATUS(std::system(cmd.c_str()));
        };
        auto slurp = [](const std::string& p) {
            std::ifstream f(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(f), {});
        };
        auto hashes_of = [&](const std::string& ckpt) {
            std::ifstream f(fs::path(ckpt) / "manifest.json");
            json m = json::parse(f);
            std::string acc;
            for (const auto& rec : m.at("params"))
                acc += rec.at("name").get<std::string>() + ":" +
                       rec.at("hash").get<std::string>() + "\n";
            return acc;
        };
        std::vector<std::string> report_bytes, hash_sets;
        for (int rep = 0; rep < 2; rep++) {
            std::string root = scratch + "/repro" + std::to_string(rep);
            std::string corpus_dir = root + "/corpus";
            std::string concept_dir = root + "/concept";
            int rc = 0;
            rc |= shell("gen-data --out " + corpus_dir + " --size 64 --seed 9");
            rc |= shell("gen-data --out " + concept_dir + " --corpus " + corpus_dir +
                        " --concept-index 0 --n-refs 3 --seed 10");
            rc |= shell("train --stage pretrain --config " + cfg_path + " --corpus " +
                        corpus_dir + " --out " + root + " --run-id pre");
            rc |= shell("train --stage distill-base --config " + cfg_path +
                        " --corpus " + corpus_dir + " --ckpt " + root +
                        "/pre/checkpoint --out " + root + " --run-id base");
            rc |= shell("train --stage personalize --config " + cfg_path +
                        " --concept " + concept_dir + " --ckpt " + root +
                        "/base/checkpoint --out " + root + " --run-id pers");
            rc |= shell("train --stage echo --config " + cfg_path + " --ckpt " + root +
                        "/pers/checkpoint --out " + root + " --run-id echo");
            rc |= shell("eval --ckpts " + root + "/pers/checkpoint " + root +
                        "/echo/checkpoint --concepts " + concept_dir +
                        " --nfes 1 2 --config " + cfg_path + " --out " + root +
                        "/report");
            REQUIRE(c, rc == 0, "pipeline rep " + std::to_string(rep));
            std::string all_hashes;
            for (const char* stage : {"pre", "base", "pers", "echo"})
                all_hashes += hashes_of(root + "/" + stage + "/checkpoint");
            hash_sets.push_back(all_hashes);
            report_bytes.push_back(slurp(root + "/report/report.json"));
        }
        REQUIRE(c, !hash_sets[0].empty() && hash_sets[0] == hash_sets[1],
                "checkpoint parameter hashes differ");
        REQUIRE(c, !report_bytes[0].empty() && report_bytes[0] == report_bytes[1],
                "report bytes differ");
    });

    int failed = 0;
    for (const auto& r : g_results)
        if (!r.pass) failed++;
    std::printf("%d/%zu criteria passed\n", static_cast<int>(g_results.size()) - failed,
                g_results.size());
    return failed == 0 ? 0 : 1;
}
