#include "medlsdm/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "medlsdm/errors.hpp"

namespace medlsdm {

using nlohmann::json;

namespace {

uint64_t fnv1a64_bytes(const char* data, size_t len) {
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ull;
    }
    return h;
}

constexpr char kMagic[8] = {'M', 'L', 'S', 'D', 'M', 'C', 'K', 'P'};

json compression_to_json(const CompressionConfig& c) {
    return json{{"t", c.t},
                {"n_z", c.n_z},
                {"K", c.K},
                {"base_channels", c.base_channels},
                {"num_groups", c.num_groups},
                {"in_channels", c.in_channels}};
}

CompressionConfig compression_from_json(const json& j) {
    CompressionConfig c;
    c.t             = j.at("t");
    c.n_z           = j.at("n_z");
    c.K             = j.at("K");
    c.base_channels = j.at("base_channels");
    c.num_groups    = j.at("num_groups");
    c.in_channels   = j.at("in_channels");
    return c;
}

json denoiser_to_json(const DenoiserConfig& c) {
    return json{{"widths", c.widths},
                {"num_groups", c.num_groups},
                {"time_dim", c.time_dim},
                {"sem_width", c.sem_width},
                {"num_classes", c.num_classes},
                {"latent_channels", c.latent_channels},
                {"compression_t", c.compression_t},
                {"attention_levels", c.attention_levels}};
}

DenoiserConfig denoiser_from_json(const json& j) {
    DenoiserConfig c;
    c.widths           = j.at("widths").get<std::vector<int64_t>>();
    c.num_groups       = j.at("num_groups");
    c.time_dim         = j.at("time_dim");
    c.sem_width        = j.at("sem_width");
    c.num_classes      = j.at("num_classes");
    c.latent_channels  = j.at("latent_channels");
    c.compression_t    = j.at("compression_t");
    c.attention_levels = j.at("attention_levels").get<std::vector<int64_t>>();
    return c;
}

void append_store(json& arrays, std::vector<char>& blob, const std::string& prefix,
                  const ParamStore& store) {
    for (const auto& [name, tensor] : store) {
        std::vector<char> raw(static_cast<size_t>(tensor.numel()) * 4);
        for (int64_t i = 0; i < tensor.numel(); ++i) {
            const float f = static_cast<float>(tensor[i]);
            std::memcpy(raw.data() + i * 4, &f, 4);
        }
        char hex[17];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(fnv1a64_bytes(raw.data(), raw.size())));
        arrays.push_back(json{{"name", prefix + name},
                              {"shape", tensor.shape()},
                              {"offset", blob.size()},
                              {"digest", hex}});
        blob.insert(blob.end(), raw.begin(), raw.end());
    }
}

}  // namespace

void save_checkpoint(const CheckpointBundle& bundle, const std::string& path) {
    json meta;
    meta["phase"]        = bundle.phase;
    meta["seed"]         = bundle.seed;
    meta["step"]         = bundle.step;
    meta["compression"]  = compression_to_json(bundle.compression);
    meta["latent_range"] = json{{"lo", bundle.latent_range.lo}, {"hi", bundle.latent_range.hi}};
    if (bundle.phase == "sdm") {
        meta["denoiser"] = denoiser_to_json(bundle.denoiser);
        meta["schedule"] = json{{"T", bundle.schedule_T}, {"s", bundle.schedule_s}};
    }
    meta["optimizer_steps"] = bundle.optimizer_steps;

    json arrays = json::array();
    std::vector<char> blob;
    append_store(arrays, blob, "", bundle.params);
    append_store(arrays, blob, "optim/", bundle.optimizer_moments);
    meta["arrays"]     = arrays;
    meta["data_bytes"] = blob.size();

    const std::string meta_str = meta.dump();
    const std::string tmp      = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out)
            throw DataError("checkpoint: cannot open " + tmp + " for writing");
        out.write(kMagic, 8);
        const int32_t version = bundle.version;
        out.write(reinterpret_cast<const char*>(&version), 4);
        const uint64_t meta_len = meta_str.size();
        out.write(reinterpret_cast<const char*>(&meta_len), 8);
        out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out)
            throw DataError("checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

CheckpointBundle load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("checkpoint: cannot open " + path);

    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw CorruptionError("checkpoint: bad magic in " + path);
    int32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint: version " + std::to_string(version) +
                           " != supported version " + std::to_string(kCheckpointVersion));
    uint64_t meta_len = 0;
    in.read(reinterpret_cast<char*>(&meta_len), 8);
    if (!in)
        throw CorruptionError("checkpoint: truncated header in " + path);
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!in)
        throw CorruptionError("checkpoint: truncated metadata in " + path);

    json meta;
    try {
        meta = json::parse(meta_str);
    } catch (const json::exception& e) {
        throw CorruptionError("checkpoint: metadata parse failure: " + std::string(e.what()));
    }

    const uint64_t data_bytes = meta.at("data_bytes");
    std::vector<char> blob(data_bytes);
    in.read(blob.data(), static_cast<std::streamsize>(data_bytes));
    if (!in || in.gcount() != static_cast<std::streamsize>(data_bytes))
        throw CorruptionError("checkpoint: truncated data section in " + path);

    CheckpointBundle bundle;
    bundle.version     = version;
    bundle.phase       = meta.at("phase");
    bundle.seed        = meta.at("seed");
    bundle.step        = meta.at("step");
    bundle.compression = compression_from_json(meta.at("compression"));
    bundle.latent_range.lo = meta.at("latent_range").at("lo");
    bundle.latent_range.hi = meta.at("latent_range").at("hi");
    if (bundle.phase == "sdm") {
        bundle.denoiser   = denoiser_from_json(meta.at("denoiser"));
        bundle.schedule_T = meta.at("schedule").at("T");
        bundle.schedule_s = meta.at("schedule").at("s");
    }
    bundle.optimizer_steps =
        meta.at("optimizer_steps").get<std::map<std::string, int64_t>>();

    for (const auto& entry : meta.at("arrays")) {
        const std::string name = entry.at("name");
        const auto shape       = entry.at("shape").get<std::vector<int64_t>>();
        const uint64_t offset  = entry.at("offset");
        Tensor tensor(shape);
        const size_t bytes = static_cast<size_t>(tensor.numel()) * 4;
        if (offset + bytes > blob.size())
            throw CorruptionError("checkpoint: array " + name + " exceeds data section");
        const uint64_t digest = fnv1a64_bytes(blob.data() + offset, bytes);
        char hex[17];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(digest));
        if (entry.at("digest") != std::string(hex))
            throw CorruptionError("checkpoint: digest mismatch for array " + name);
        for (int64_t i = 0; i < tensor.numel(); ++i) {
            float f;
            std::memcpy(&f, blob.data() + offset + static_cast<size_t>(i) * 4, 4);
            tensor[i] = static_cast<double>(f);
        }
        if (name.rfind("optim/", 0) == 0)
            bundle.optimizer_moments[name.substr(6)] = std::move(tensor);
        else
            bundle.params[name] = std::move(tensor);
    }
    return bundle;
}

VqGan vqgan_from_bundle(const CheckpointBundle& bundle) {
    if (bundle.phase != "vqgan")
        throw ConfigError("expected a vqgan checkpoint, got phase '" + bundle.phase + "'");
    VqGan net(bundle.compression, bundle.seed);
    for (auto& [name, tensor] : net.params()) {
        auto it = bundle.params.find(name);
        if (it == bundle.params.end())
            throw CorruptionError("vqgan checkpoint missing array " + name);
        if (it->second.shape() != tensor.shape())
            throw CorruptionError("vqgan checkpoint shape mismatch for " + name);
        tensor = it->second;
    }
    // phi params live both in the store and the perceptual net
    for (auto& [name, tensor] : net.perceptual().params)
        tensor = net.params().at(name);
    return net;
}

Denoiser denoiser_from_bundle(const CheckpointBundle& bundle) {
    if (bundle.phase != "sdm")
        throw ConfigError("expected an sdm checkpoint, got phase '" + bundle.phase + "'");
    Denoiser net(bundle.denoiser, bundle.seed);
    for (auto& [name, tensor] : net.params()) {
        auto it = bundle.params.find(name);
        if (it == bundle.params.end())
            throw CorruptionError("sdm checkpoint missing array " + name);
        if (it->second.shape() != tensor.shape())
            throw CorruptionError("sdm checkpoint shape mismatch for " + name);
        tensor = it->second;
    }
    return net;
}

// ---------------- training phases ----------------

void PipelineConfig::validate() const {
    compression.validate();
    denoiser.validate();
    compression.check_divisible(volume_shape);
    if (diffusion_T < 1)
        throw ConfigError("diffusion_T must be >= 1");
    if (vqgan_steps < 1 || sdm_steps < 1 || vqgan_batch < 1 || sdm_batch < 1)
        throw ConfigError("step budgets and batch sizes must be >= 1");
    if (denoiser.latent_channels != compression.n_z)
        throw ConfigError("denoiser.latent_channels must equal compression.n_z");
    if (denoiser.compression_t != compression.t)
        throw ConfigError("denoiser.compression_t must equal compression.t");
}

namespace {

CheckpointBundle make_vqgan_bundle(const VqGan& net, const Adam& opt_g, const Adam& opt_d,
                                   uint64_t seed, int64_t step) {
    CheckpointBundle b;
    b.phase       = "vqgan";
    b.seed        = seed;
    b.step        = step;
    b.compression = net.config();
    b.params      = net.params();
    snap_to_f32(b.params);
    Codebook cb;
    cb.entries     = b.params.at("codebook");
    b.latent_range = codebook_range(cb);
    for (const Adam* opt : {&opt_g, &opt_d})
        for (const auto& [name, mo] : opt->state()) {
            b.optimizer_moments["adam.m." + name] = mo.m;
            b.optimizer_moments["adam.v." + name] = mo.v;
            b.optimizer_steps[name]               = mo.t;
        }
    snap_to_f32(b.optimizer_moments);
    return b;
}

}  // namespace

PhaseResult train_vqgan_phase(const DatasetManifest& manifest, const PipelineConfig& cfg,
                              uint64_t seed, const std::string& out_dir) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    auto samples = load_samples(manifest);
    if (samples.empty())
        throw DataError("train_vqgan_phase: empty manifest");
    std::vector<Tensor> volumes;
    for (const auto& s : samples)
        volumes.push_back(preprocess(s.volume, cfg.volume_shape).data);

    VqGan net(cfg.compression, seed);
    VqGanTrainConfig tc = cfg.vqgan_train;
    VqGanTrainer trainer(std::move(net), tc, seed);
    BatchSequence batches(manifest, cfg.vqgan_batch, seed);

    PhaseResult result;
    ParamStore last_good = trainer.net().params();
    for (int64_t step = 0; step < cfg.vqgan_steps; ++step) {
        auto idx = batches.next();
        std::vector<Tensor> batch;
        for (int64_t i : idx)
            batch.push_back(volumes[static_cast<size_t>(i)]);
        try {
            StepReport rep = trainer.step(batch);
            result.report.vqgan_records.push_back(rep);
            result.report.final_loss = rep.l_rec;
            last_good                = trainer.net().params();
        } catch (const DivergenceError&) {
            if (!out_dir.empty()) {
                CheckpointBundle lg = make_vqgan_bundle(trainer.net(), trainer.generator_optimizer(),
                                                        trainer.discriminator_optimizer(), seed, step);
                lg.params = last_good;
                snap_to_f32(lg.params);
                std::filesystem::create_directories(out_dir);
                save_checkpoint(lg, out_dir + "/vqgan_last_good.ckpt");
            }
            throw;
        }
    }

    for (int64_t count : trainer.codebook_usage())
        if (count > 0)
            ++result.report.codebook_entries_used;

    result.bundle = make_vqgan_bundle(trainer.net(), trainer.generator_optimizer(),
                                      trainer.discriminator_optimizer(), seed, cfg.vqgan_steps);
    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        save_checkpoint(result.bundle, out_dir + "/vqgan.ckpt");
        std::ofstream rec(out_dir + "/vqgan_records.csv");
        rec << step_report_header() << "\n";
        for (const auto& r : result.report.vqgan_records)
            rec << to_csv(r) << "\n";
    }
    return result;
}

PhaseResult train_sdm_phase(const DatasetManifest& manifest, const CheckpointBundle& vqgan_ckpt,
                            const PipelineConfig& cfg, uint64_t seed, const std::string& out_dir) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    for (const auto& e : manifest.entries)
        if (e.map_path.empty())
            throw DataError("train_sdm_phase: unlabeled entry '" + e.id +
                            "' (paired data required)");

    auto samples = load_samples(manifest);
    VqGan frozen = vqgan_from_bundle(vqgan_ckpt);
    const LatentRange range = vqgan_ckpt.latent_range;

    // Frozen encoder: latents and one-hot maps are fixed per sample.
    std::vector<Tensor> z0s, onehots;
    for (const auto& s : samples) {
        Volume pre   = preprocess(s.volume, cfg.volume_shape);
        Tensor z_hat = frozen.encode(pre.data);
        z0s.push_back(minmax_map(z_hat, range, MapDirection::Forward));
        SemanticMap m = s.map;
        if (m.H != cfg.volume_shape[0] || m.W != cfg.volume_shape[1] ||
            m.L != cfg.volume_shape[2])
            m = preprocess_map(m, cfg.volume_shape);
        onehots.push_back(one_hot(m));
    }

    DiffusionSchedule schedule = build_cosine_schedule(cfg.diffusion_T, cfg.cosine_s);
    Denoiser denoiser(cfg.denoiser, seed);
    Adam opt(cfg.sdm_lr, cfg.vqgan_train.beta1, cfg.vqgan_train.beta2);
    BatchSequence batches(manifest, cfg.sdm_batch, seed);
    Rng draw_rng = Rng(seed).substream("sdm.draws");

    PhaseResult result;
    for (int64_t step = 0; step < cfg.sdm_steps; ++step) {
        auto idx    = batches.next();
        ParamMap pm = wrap_params(denoiser.params(), true);
        Var loss;
        for (int64_t i : idx) {
            const Tensor& z0 = z0s[static_cast<size_t>(i)];
            const int64_t t  = draw_rng.uniform_int(1, schedule.T);
            Tensor eps       = Tensor::randn(z0.shape(), draw_rng);
            NoisingResult nr = forward_sample(z0, t, eps, schedule);

            Var pred = denoiser.predict_noise(pm, make_const(nr.z_t), t,
                                              make_const(onehots[static_cast<size_t>(i)]));
            Var d    = sub(make_const(eps), pred);
            Var l    = mean(mul(d, d));
            loss     = loss ? add(loss, l) : l;
        }
        loss = scale(loss, 1.0 / static_cast<double>(idx.size()));
        if (!std::isfinite(loss->value[0]))
            throw DivergenceError("sdm training diverged at step " + std::to_string(step));
        backward(loss);
        opt.step(denoiser.params(), pm);
        result.report.sdm_records.push_back({step, loss->value[0]});
        result.report.final_loss = loss->value[0];
    }

    CheckpointBundle& b = result.bundle;
    b.phase             = "sdm";
    b.seed              = seed;
    b.step              = cfg.sdm_steps;
    b.compression       = vqgan_ckpt.compression;
    b.denoiser          = cfg.denoiser;
    b.schedule_T        = cfg.diffusion_T;
    b.schedule_s        = cfg.cosine_s;
    b.latent_range      = range;
    b.params            = denoiser.params();
    snap_to_f32(b.params);
    for (const auto& [name, mo] : opt.state()) {
        b.optimizer_moments["adam.m." + name] = mo.m;
        b.optimizer_moments["adam.v." + name] = mo.v;
        b.optimizer_steps[name]               = mo.t;
    }
    snap_to_f32(b.optimizer_moments);

    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        save_checkpoint(b, out_dir + "/sdm.ckpt");
        std::ofstream rec(out_dir + "/sdm_records.csv");
        rec << "step,L_simple\n";
        for (const auto& r : result.report.sdm_records)
            rec << r.step << "," << r.l_simple << "\n";
    }
    return result;
}

SynthesisResult synthesize(const SemanticMap& m, const CheckpointBundle& vqgan_ckpt,
                           const CheckpointBundle& sdm_ckpt, uint64_t seed,
                           std::optional<int64_t> snapshot_every) {
    m.validate();
    const CompressionConfig& comp = sdm_ckpt.compression;
    comp.check_divisible({m.H, m.W, m.L});

    VqGan vq          = vqgan_from_bundle(vqgan_ckpt);
    Denoiser denoiser = denoiser_from_bundle(sdm_ckpt);
    if (denoiser.config().num_classes != m.num_classes)
        throw ShapeError("synthesize: map has " + std::to_string(m.num_classes) +
                         " classes, model expects " +
                         std::to_string(denoiser.config().num_classes));

    DiffusionSchedule schedule = build_cosine_schedule(sdm_ckpt.schedule_T, sdm_ckpt.schedule_s);
    const Tensor onehot        = one_hot(m);

    const std::vector<int64_t> latent_shape{m.H / comp.t, m.W / comp.t, m.L / comp.t, comp.n_z};
    DenoiserFn fn = [&](const Tensor& z_t, int64_t t) {
        return denoiser.predict_noise(z_t, t, onehot);
    };
    SampleResult sampled = sample_loop(latent_shape, fn, schedule, seed, snapshot_every);

    const LatentRange range = sdm_ckpt.latent_range;
    const Codebook cb       = vq.codebook();
    const auto decode_latent = [&](const Tensor& z) {
        Tensor clipped(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i)
            clipped[i] = std::clamp(z[i], -1.0, 1.0);
        Tensor unnorm        = minmax_map(clipped, range, MapDirection::Inverse);
        QuantizationResult q = quantize(unnorm, cb);
        Volume out;
        out.data            = vq.decode(q.z_q);
        out.spacing         = {1.0, 1.0, 1.0};
        out.intensity_range = {out.data.min(), out.data.max()};
        return out;
    };

    SynthesisResult result;
    result.volume         = decode_latent(sampled.latent);
    result.snapshot_steps = sampled.snapshot_steps;
    for (const auto& snap : sampled.snapshots)
        result.snapshots.push_back(decode_latent(snap));
    return result;
}

}  // namespace medlsdm
