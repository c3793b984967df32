// medlsdm: two-stage 3D semantic image synthesis.
// Phase 1 trains a VQ-GAN compressor; phase 2 trains a semantic-map-
// conditioned latent diffusion model on top of the frozen codebook.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "medlsdm/errors.hpp"
#include "medlsdm/metrics.hpp"
#include "medlsdm/montage.hpp"
#include "medlsdm/nifti.hpp"
#include "medlsdm/pipeline.hpp"
#include "medlsdm/run_config.hpp"
#include "medlsdm/seg_harness.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using namespace medlsdm;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<uint64_t> seed;
    std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Config file (JSON)");
    cmd->add_option("--set", args.overrides, "Override a config key, e.g. --set diffusion.T=10");
    cmd->add_option_function<uint64_t>(
        "--seed", [&args](uint64_t v) { args.seed = v; }, "Master seed");
    cmd->add_option("--out", args.out_dir, "Output directory");
}

RunConfig resolve(const CommonArgs& args) {
    return RunConfig::resolve(args.config_path, args.overrides, args.seed);
}

int cmd_gen_toy(const CommonArgs& args) {
    RunConfig cfg = resolve(args);
    cfg.echo(args.out_dir);
    const auto shape = cfg.volume_shape();
    auto train = generate_toy_dataset(cfg.data_num_train(), shape, cfg.data_num_classes(),
                                      cfg.seed(), args.out_dir + "/train", "train");
    auto test  = generate_toy_dataset(cfg.data_num_test(), shape, cfg.data_num_classes(),
                                      cfg.seed() + 1, args.out_dir + "/test", "test");
    std::cout << "wrote " << train.entries.size() << " train and " << test.entries.size()
              << " test samples under " << args.out_dir << "\n";
    return 0;
}

int cmd_train_vqgan(const CommonArgs& args, const std::string& manifest_path) {
    RunConfig cfg = resolve(args);
    cfg.echo(args.out_dir);
    DatasetManifest manifest = load_manifest(manifest_path);
    PhaseResult res = train_vqgan_phase(manifest, cfg.pipeline(), cfg.seed(), args.out_dir);
    std::cout << "vqgan: " << res.report.vqgan_records.size() << " steps, final L_rec "
              << res.report.final_loss << ", codebook entries used "
              << res.report.codebook_entries_used << "/" << cfg.compression().K << ", "
              << res.report.wall_seconds << " s\n"
              << "checkpoint: " << args.out_dir << "/vqgan.ckpt\n";
    return 0;
}

int cmd_train_sdm(const CommonArgs& args, const std::string& manifest_path,
                  const std::string& vqgan_path) {
    RunConfig cfg = resolve(args);
    cfg.echo(args.out_dir);
    DatasetManifest manifest = load_manifest(manifest_path);
    CheckpointBundle vq      = load_checkpoint(vqgan_path);
    PhaseResult res = train_sdm_phase(manifest, vq, cfg.pipeline(), cfg.seed(), args.out_dir);
    std::cout << "sdm: " << res.report.sdm_records.size() << " steps, final L_simple "
              << res.report.final_loss << ", " << res.report.wall_seconds << " s\n"
              << "checkpoint: " << args.out_dir << "/sdm.ckpt\n";
    return 0;
}

int cmd_sample(const CommonArgs& args, const std::string& map_path, const std::string& vqgan_path,
               const std::string& sdm_path, int64_t snapshot_every) {
    RunConfig cfg = resolve(args);
    cfg.echo(args.out_dir);
    SemanticMap m       = load_semantic_map(map_path);
    CheckpointBundle vq = load_checkpoint(vqgan_path);
    CheckpointBundle sd = load_checkpoint(sdm_path);
    if (m.num_classes < sd.denoiser.num_classes)
        m.num_classes = static_cast<int32_t>(sd.denoiser.num_classes);

    std::optional<int64_t> snap;
    if (snapshot_every > 0)
        snap = snapshot_every;
    SynthesisResult res = synthesize(m, vq, sd, cfg.seed(), snap);

    std::filesystem::create_directories(args.out_dir);
    save_nifti(res.volume, args.out_dir + "/sample.nii");
    for (size_t i = 0; i < res.snapshots.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "/snapshot_t%04lld.nii",
                      static_cast<long long>(res.snapshot_steps[i]));
        save_nifti(res.snapshots[i], args.out_dir + name);
    }
    std::cout << "sample written to " << args.out_dir << "/sample.nii (" << res.snapshots.size()
              << " snapshots)\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& real_manifest,
                 const std::string& synth_manifest) {
    RunConfig cfg = resolve(args);
    cfg.echo(args.out_dir);
    const auto shape = cfg.volume_shape();

    auto real  = load_samples(load_manifest(real_manifest));
    auto synth = load_samples(load_manifest(synth_manifest));

    std::vector<Volume> real_vols, synth_vols;
    for (const auto& s : real)
        real_vols.push_back(preprocess(s.volume, shape));
    for (const auto& s : synth)
        synth_vols.push_back(preprocess(s.volume, shape));

    // Paired metrics by id where both sets share samples.
    std::filesystem::create_directories(args.out_dir);
    std::ofstream pairs(args.out_dir + "/paired_metrics.csv");
    pairs << "id,rmse,psnr,ssim\n";
    double sum_rmse = 0, sum_psnr = 0, sum_ssim = 0;
    int64_t paired = 0;
    for (size_t i = 0; i < synth.size(); ++i) {
        for (size_t j = 0; j < real.size(); ++j) {
            if (real[j].id != synth[i].id)
                continue;
            auto [rmse, psnr] = rmse_psnr(real_vols[j], synth_vols[i], 1.0);
            const double s    = ssim(real_vols[j], synth_vols[i]);
            pairs << synth[i].id << "," << rmse << "," << psnr << "," << s << "\n";
            sum_rmse += rmse;
            sum_psnr += psnr;
            sum_ssim += s;
            ++paired;
        }
    }

    FeatureExtractor ex = FeatureExtractor::fixed_random(
        real_vols.front().channels(), cfg.metrics_feature_dim(), cfg.metrics_feature_seed());
    GaussianSummary gp = extract_features(real_vols, ex);
    GaussianSummary gq = extract_features(synth_vols, ex);
    const double fd    = frechet_distance(gp, gq);

    std::vector<std::tuple<std::string, std::string, double>> rows;
    rows.emplace_back("frechet", "synthetic-vs-real", fd);
    if (paired > 0) {
        rows.emplace_back("rmse", "paired-mean", sum_rmse / paired);
        rows.emplace_back("psnr", "paired-mean", sum_psnr / paired);
        rows.emplace_back("ssim", "paired-mean", sum_ssim / paired);
    }
    write_metric_summary(args.out_dir + "/metrics.csv", rows);

    std::cout << "frechet(synthetic, real) = " << fd << "\n";
    if (paired > 0)
        std::cout << "paired mean rmse " << sum_rmse / paired << ", psnr " << sum_psnr / paired
                  << ", ssim " << sum_ssim / paired << " over " << paired << " pairs\n";
    std::cout << "summary: " << args.out_dir << "/metrics.csv\n";
    return 0;
}

int cmd_faithfulness(const CommonArgs& args, const std::string& train_manifest,
                     const std::string& test_manifest, const std::string& vqgan_path,
                     const std::string& sdm_path) {
    RunConfig cfg = resolve(args);
    cfg.echo(args.out_dir);
    const auto shape = cfg.volume_shape();

    auto train_set = load_samples(load_manifest(train_manifest));
    auto test_set  = load_samples(load_manifest(test_manifest));
    CheckpointBundle vq = load_checkpoint(vqgan_path);
    CheckpointBundle sd = load_checkpoint(sdm_path);

    for (auto& s : train_set)
        s.volume = preprocess(s.volume, shape);
    for (auto& s : test_set)
        s.volume = preprocess(s.volume, shape);

    std::vector<PairedSample> synth;
    for (size_t i = 0; i < test_set.size(); ++i) {
        PairedSample p;
        p.id     = test_set[i].id + "_synth";
        p.map    = test_set[i].map;
        p.volume = synthesize(test_set[i].map, vq, sd, cfg.seed() + 1000 + i).volume;
        synth.push_back(std::move(p));
    }

    FaithfulnessResult res =
        faithfulness_harness(train_set, test_set, synth, cfg.seg(), cfg.seed());

    std::vector<std::tuple<std::string, std::string, double>> rows;
    rows.emplace_back("dice", "real-train", res.real_train.mean);
    rows.emplace_back("dice", "real-test", res.real_test.mean);
    rows.emplace_back("dice", "synthetic", res.synthetic.mean);
    std::filesystem::create_directories(args.out_dir);
    write_metric_summary(args.out_dir + "/dice.csv", rows);

    std::cout << "dice real-train " << res.real_train.mean << "\n"
              << "dice real-test  " << res.real_test.mean << "\n"
              << "dice synthetic  " << res.synthetic.mean << "\n"
              << "table: " << args.out_dir << "/dice.csv\n";
    return 0;
}

int cmd_montage(const CommonArgs& args, const std::string& input, bool as_map, int64_t cols) {
    RunConfig cfg = resolve(args);
    std::filesystem::create_directories(args.out_dir);
    const std::string stem =
        std::filesystem::path(input).stem().string();
    const std::string out_path = args.out_dir + "/" + stem + "_montage.pgm";
    if (as_map)
        write_montage(load_semantic_map(input), out_path, cols);
    else
        write_montage(load_volume(input), out_path, cols);
    std::cout << "montage written to " << out_path << "\n";
    return 0;
}

int cmd_info(const CommonArgs& args) {
    RunConfig cfg = resolve(args);

    VqGan vq(cfg.compression(), cfg.seed());
    Denoiser dn(cfg.denoiser(), cfg.seed());

    const auto count_prefix = [](const ParamStore& ps, const std::string& prefix) {
        int64_t n = 0;
        for (const auto& [name, tensor] : ps)
            if (name.rfind(prefix, 0) == 0)
                n += tensor.numel();
        return n;
    };

    std::cout << "component parameter counts\n";
    std::cout << "  vqgan.encoder      " << count_prefix(vq.params(), "enc.") << "\n";
    std::cout << "  vqgan.decoder      " << count_prefix(vq.params(), "dec.") << "\n";
    std::cout << "  vqgan.codebook     " << count_prefix(vq.params(), "codebook") << "\n";
    std::cout << "  vqgan.disc2d       " << count_prefix(vq.params(), "d2d.") << "\n";
    std::cout << "  vqgan.disc3d       " << count_prefix(vq.params(), "d3d.") << "\n";
    std::cout << "  vqgan.perceptual   " << count_prefix(vq.params(), "phi.") << " (fixed)\n";
    std::cout << "  denoiser.unet      " << count_prefix(dn.params(), "unet.") << "\n";
    std::cout << "  denoiser.semantic  " << count_prefix(dn.params(), "sem.") << "\n";
    std::cout << "  total              "
              << param_count(vq.params()) + param_count(dn.params()) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* det = std::getenv("MEDLSDM_DETERMINISTIC"); det && det[0] == '1') {
#ifdef _OPENMP
        omp_set_num_threads(1);
#endif
    }

    CLI::App app{"medlsdm: 3D semantic image synthesis via latent diffusion"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string manifest_path, test_manifest_path, vqgan_path, sdm_path, map_path, input_path;
    std::string real_manifest, synth_manifest;
    int64_t snapshot_every = 0;
    int64_t montage_cols   = 8;
    bool montage_as_map    = false;

    auto* gen = app.add_subcommand("gen-toy", "Generate a procedural toy dataset");
    add_common(gen, args);

    auto* tv = app.add_subcommand("train-vqgan", "Phase 1: train the VQ-GAN compressor");
    add_common(tv, args);
    tv->add_option("--manifest", manifest_path, "Training manifest")->required();

    auto* ts = app.add_subcommand("train-sdm", "Phase 2: train the semantic diffusion model");
    add_common(ts, args);
    ts->add_option("--manifest", manifest_path, "Paired training manifest")->required();
    ts->add_option("--vqgan", vqgan_path, "Frozen VQ-GAN checkpoint")->required();

    auto* sa = app.add_subcommand("sample", "Synthesize a volume from a semantic map");
    add_common(sa, args);
    sa->add_option("--map", map_path, "Semantic map (.nii)")->required();
    sa->add_option("--vqgan", vqgan_path, "VQ-GAN checkpoint")->required();
    sa->add_option("--sdm", sdm_path, "Diffusion checkpoint")->required();
    sa->add_option("--snapshot-every", snapshot_every,
                   "Record every k-th intermediate state (0 = off)");

    auto* ev = app.add_subcommand("evaluate", "RMSE/PSNR/SSIM + Frechet distance between sets");
    add_common(ev, args);
    ev->add_option("--real", real_manifest, "Real-set manifest")->required();
    ev->add_option("--synth", synth_manifest, "Synthetic-set manifest")->required();

    auto* fa = app.add_subcommand("faithfulness", "Segmentation-based mask faithfulness table");
    add_common(fa, args);
    fa->add_option("--train-manifest", manifest_path, "Real training manifest")->required();
    fa->add_option("--test-manifest", test_manifest_path, "Real test manifest")->required();
    fa->add_option("--vqgan", vqgan_path, "VQ-GAN checkpoint")->required();
    fa->add_option("--sdm", sdm_path, "Diffusion checkpoint")->required();

    auto* mo = app.add_subcommand("montage", "Render axial/coronal/sagittal slice grids (PGM)");
    add_common(mo, args);
    mo->add_option("--input", input_path, "Volume or map (.nii)")->required();
    mo->add_flag("--map", montage_as_map, "Treat input as a semantic map");
    mo->add_option("--cols", montage_cols, "Tiles per plane row");

    auto* in = app.add_subcommand("info", "Report parameter counts per component");
    add_common(in, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);  // --help exits 0 here
    }

    try {
        if (gen->parsed())
            return cmd_gen_toy(args);
        if (tv->parsed())
            return cmd_train_vqgan(args, manifest_path);
        if (ts->parsed())
            return cmd_train_sdm(args, manifest_path, vqgan_path);
        if (sa->parsed())
            return cmd_sample(args, map_path, vqgan_path, sdm_path, snapshot_every);
        if (ev->parsed())
            return cmd_evaluate(args, real_manifest, synth_manifest);
        if (fa->parsed())
            return cmd_faithfulness(args, manifest_path, test_manifest_path, vqgan_path, sdm_path);
        if (mo->parsed())
            return cmd_montage(args, input_path, montage_as_map, montage_cols);
        if (in->parsed())
            return cmd_info(args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 4;
    } catch (const CorruptionError& e) {
        std::cerr << "corruption: " << e.what() << "\n";
        return 5;
    } catch (const VersionError& e) {
        std::cerr << "version error: " << e.what() << "\n";
        return 5;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
