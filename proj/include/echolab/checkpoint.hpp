#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "echolab/critics.hpp"
#include "echolab/data.hpp"
#include "echolab/nets.hpp"
#include "echolab/probe.hpp"

namespace echolab {

template <class J>
void to_json(J& j, const ArchConfig& a) {
    j = J{{"img_channels", a.img_channels},
          {"img_size", a.img_size},
          {"ch1", a.ch1},
          {"ch2", a.ch2},
          {"ch3", a.ch3},
          {"cond_dim", a.cond_dim},
          {"ctx_tokens", a.ctx_tokens},
          {"temb_dim", a.temb_dim},
          {"vocab_size", a.vocab_size},
          {"max_prompt_len", a.max_prompt_len},
          {"token_embed_dim", a.token_embed_dim},
          {"embedder_widths", a.embedder_widths}};
}
template <class J>
void from_json(const J& j, ArchConfig& a) {
    j.at("img_channels").get_to(a.img_channels);
    j.at("img_size").get_to(a.img_size);
    j.at("ch1").get_to(a.ch1);
    j.at("ch2").get_to(a.ch2);
    j.at("ch3").get_to(a.ch3);
    j.at("cond_dim").get_to(a.cond_dim);
    j.at("ctx_tokens").get_to(a.ctx_tokens);
    j.at("temb_dim").get_to(a.temb_dim);
    j.at("vocab_size").get_to(a.vocab_size);
    j.at("max_prompt_len").get_to(a.max_prompt_len);
    j.at("token_embed_dim").get_to(a.token_embed_dim);
    j.at("embedder_widths").get_to(a.embedder_widths);
}

inline ordered_json schedule_to_json(const NoiseSchedule& s) {
    // schedules are stored as their generating spec, never as raw arrays
    return ordered_json{
        {"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}, {"kind", s.kind}};
}
inline NoiseSchedule schedule_from_json(const json& j) {
    check(j.at("kind").get<std::string>() == "linear",
          "schedule_from_json: unsupported schedule kind");
    return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                         j.at("beta_end").get<double>());
}

// ---------------------------------------------------------------------------
// blob store
// ---------------------------------------------------------------------------

namespace detail {

inline void write_blob(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "write_blob: cannot open " + path);
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline void read_blob(const std::string& path, Tensor& t, const std::string& name,
                      uint64_t expect_hash) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw IntegrityError("checkpoint blob missing for " + name);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(t.size() * sizeof(double)))
        throw IntegrityError("checkpoint blob truncated for " + name);
    char extra;
    if (f.read(&extra, 1))
        throw IntegrityError("checkpoint blob oversized for " + name);
    if (t.content_hash() != expect_hash)
        throw IntegrityError("checkpoint blob hash mismatch for " + name);
}

struct NamedStore {
    std::string prefix;
    ParamStore* store;
};

inline ordered_json save_stores(const std::string& dir,
                                const std::vector<NamedStore>& stores) {
    fs::create_directories(fs::path(dir) / "params");
    ordered_json list = ordered_json::array();
    int idx = 0;
    for (const auto& ns : stores) {
        for (auto* p : ns.store->all()) {
            char file[32];
            std::snprintf(file, sizeof(file), "params/p%04d.bin", idx++);
            write_blob((fs::path(dir) / file).string(), p->value());
            list.push_back(ordered_json{{"name", ns.prefix + "." + p->name},
                                        {"file", file},
                                        {"shape", p->value().shape()},
                                        {"hash", hex64(p->value().content_hash())}});
        }
    }
    return list;
}

inline void load_stores(const std::string& dir, const json& list,
                        const std::vector<NamedStore>& stores) {
    size_t expected = 0;
    for (const auto& ns : stores) expected += ns.store->count();
    check(list.size() == expected, "checkpoint manifest param count mismatch");
    size_t li = 0;
    for (const auto& ns : stores) {
        for (auto* p : ns.store->all()) {
            const json& rec = list[li++];
            std::string name = rec.at("name").get<std::string>();
            check(name == ns.prefix + "." + p->name,
                  "checkpoint param order mismatch: expected " + ns.prefix + "." +
                      p->name + ", manifest has " + name);
            Shape shape = rec.at("shape").get<Shape>();
            check(shape == p->value().shape(), "checkpoint shape mismatch for " + name);
            uint64_t hash = std::stoull(rec.at("hash").get<std::string>(), nullptr, 16);
            Tensor t(shape);
            read_blob((fs::path(dir) / rec.at("file").get<std::string>()).string(), t,
                      name, hash);
            p->var.mutable_val() = t;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

struct Checkpoint {
    ArchConfig arch;
    ModelBundle bundle;
    CriticEnsemble ensemble;
    AlignmentProbe probe;
    ordered_json manifest;

    Checkpoint() = default;
    Checkpoint(const Checkpoint&) = delete;
    Checkpoint& operator=(const Checkpoint&) = delete;
    Checkpoint(Checkpoint&&) = default;
    Checkpoint& operator=(Checkpoint&&) = default;
};

// `extra` carries stage tag, lineage, concept metadata, resolved train config.
inline void save_checkpoint(const std::string& dir, const ModelBundle& bundle,
                            const CriticEnsemble& ensemble, const AlignmentProbe& probe,
                            const ordered_json& extra) {
    fs::create_directories(dir);
    auto& b = const_cast<ModelBundle&>(bundle);
    auto& pr = const_cast<AlignmentProbe&>(probe);
    ordered_json manifest;
    manifest["schema_version"] = 1;
    manifest["kind"] = "echolab-checkpoint";
    for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
    manifest["arch"] = bundle.arch;
    manifest["schedule"] = schedule_to_json(bundle.schedule);
    manifest["normalization"] = "png [0,1] <-> model [-1,1] via x*2-1";
    manifest["params"] = detail::save_stores(
        dir, {{"teacher", &b.teacher.params},
              {"student", &b.student.params},
              {"encoder", &b.encoder.params},
              {"embedder", &b.embedder.params},
              {"probe", &pr.params}});

    // critics subtree uses the same manifest+blob format
    auto& e = const_cast<CriticEnsemble&>(ensemble);
    std::string cdir = (fs::path(dir) / "critics").string();
    fs::create_directories(cdir);
    ordered_json cmanifest;
    cmanifest["schema_version"] = 1;
    cmanifest["kind"] = "echolab-critics";
    cmanifest["lambda_k"] = ensemble.lambda_k;
    ordered_json specs = ordered_json::array();
    for (const auto& c : ensemble.critics)
        specs.push_back(ordered_json{{"kernel", c.spec.kernel}, {"widths", c.spec.widths}});
    cmanifest["backbones"] = specs;
    std::vector<detail::NamedStore> cstores;
    for (size_t k = 0; k < e.critics.size(); k++) {
        cstores.push_back({"critic" + std::to_string(k) + ".backbone",
                           &e.critics[k].backbone_params});
        cstores.push_back(
            {"critic" + std::to_string(k) + ".head", &e.critics[k].head_params});
    }
    cmanifest["params"] = detail::save_stores(cdir, cstores);
    std::ofstream(fs::path(cdir) / "manifest.json") << cmanifest.dump(2) << "\n";
    std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf.good()) throw PrereqError("checkpoint not found at " + dir);
    ordered_json manifest = ordered_json::parse(mf);
    check(manifest.at("schema_version").get<int>() == 1,
          "unsupported checkpoint schema version");

    Checkpoint ck;
    ck.manifest = manifest;
    ck.arch = manifest.at("arch").get<ArchConfig>();
    NoiseSchedule sched = schedule_from_json(manifest.at("schedule"));
    uint64_t seed = manifest.value("seed", 0ull);
    ck.bundle = ModelBundle(ck.arch, sched, seed);
    ck.probe = AlignmentProbe(ck.arch, seed);
    detail::load_stores(dir, manifest.at("params"),
                        {{"teacher", &ck.bundle.teacher.params},
                         {"student", &ck.bundle.student.params},
                         {"encoder", &ck.bundle.encoder.params},
                         {"embedder", &ck.bundle.embedder.params},
                         {"probe", &ck.probe.params}});

    std::string cdir = (fs::path(dir) / "critics").string();
    std::ifstream cf(fs::path(cdir) / "manifest.json");
    if (!cf.good()) throw IntegrityError("checkpoint missing critics subtree: " + dir);
    json cmanifest = json::parse(cf);
    std::vector<BackboneSpec> specs;
    for (const auto& sj : cmanifest.at("backbones"))
        specs.push_back(BackboneSpec{sj.at("kernel").get<int>(),
                                     sj.at("widths").get<std::vector<int>>()});
    ck.ensemble = build_ensemble(specs, seed, ck.arch.img_channels, ck.arch.img_size);
    ck.ensemble.lambda_k = cmanifest.at("lambda_k").get<std::vector<double>>();
    std::vector<detail::NamedStore> cstores;
    for (size_t k = 0; k < ck.ensemble.critics.size(); k++) {
        cstores.push_back({"critic" + std::to_string(k) + ".backbone",
                           &ck.ensemble.critics[k].backbone_params});
        cstores.push_back(
            {"critic" + std::to_string(k) + ".head", &ck.ensemble.critics[k].head_params});
    }
    detail::load_stores(cdir, cmanifest.at("params"), cstores);

    // frozen-component contracts hold after load
    ck.bundle.embedder.freeze();
    ck.probe.freeze();
    ck.ensemble.freeze_backbones();
    return ck;
}

inline uint64_t manifest_hash(const ordered_json& manifest) {
    std::string s = manifest.dump();
    return fnv1a(s.data(), s.size());
}

}  // namespace echolab
