#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "medlsdm/pipeline.hpp"

using namespace medlsdm;

namespace {

std::string tmp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "medlsdm_pipe" / name;
    std::filesystem::create_directories(dir);
    return dir.string();
}

// Small desk configuration used by every pipeline test.
PipelineConfig small_config() {
    PipelineConfig cfg;
    cfg.volume_shape = {16, 16, 4};
    cfg.compression.t             = 2;
    cfg.compression.n_z           = 2;
    cfg.compression.K             = 16;
    cfg.compression.base_channels = 4;
    cfg.compression.num_groups    = 2;
    cfg.denoiser.widths           = {8};
    cfg.denoiser.num_groups       = 2;
    cfg.denoiser.time_dim         = 8;
    cfg.denoiser.sem_width        = 4;
    cfg.denoiser.num_classes      = 3;
    cfg.denoiser.latent_channels  = 2;
    cfg.denoiser.compression_t    = 2;
    cfg.diffusion_T               = 20;
    cfg.vqgan_steps               = 30;
    cfg.vqgan_batch               = 2;
    cfg.sdm_steps                 = 30;
    cfg.sdm_batch                 = 2;
    return cfg;
}

DatasetManifest small_data(const std::string& name, int64_t n, uint64_t seed) {
    return generate_toy_dataset(n, {16, 16, 4}, 3, seed, tmp_dir(name), "train");
}

bool params_equal(const ParamStore& a, const ParamStore& b) {
    if (a.size() != b.size())
        return false;
    for (const auto& [name, tensor] : a) {
        auto it = b.find(name);
        if (it == b.end() || !tensor.same_shape(it->second))
            return false;
        if (std::memcmp(tensor.data(), it->second.data(),
                        sizeof(double) * static_cast<size_t>(tensor.numel())) != 0)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("checkpoint roundtrip: probe outputs bit-equal; corruption detected") {
    PipelineConfig cfg = small_config();
    DatasetManifest data = small_data("ckpt_data", 4, 11);
    cfg.vqgan_steps = 4;

    PhaseResult vq = train_vqgan_phase(data, cfg, 21);
    const std::string path = tmp_dir("ckpt") + "/vqgan.ckpt";
    save_checkpoint(vq.bundle, path);
    CheckpointBundle re = load_checkpoint(path);

    SUBCASE("decode probe is bitwise identical before and after reload") {
        VqGan a = vqgan_from_bundle(vq.bundle);
        VqGan b = vqgan_from_bundle(re);
        Rng rng(3);
        Tensor z  = Tensor::randn({8, 8, 2, 2}, rng);
        Tensor da = a.decode(z);
        Tensor db = b.decode(z);
        CHECK(std::memcmp(da.data(), db.data(),
                          sizeof(double) * static_cast<size_t>(da.numel())) == 0);
        CHECK(params_equal(vq.bundle.params, re.params));
        CHECK(re.latent_range.lo == vq.bundle.latent_range.lo);
        CHECK(re.latent_range.hi == vq.bundle.latent_range.hi);
        CHECK(re.step == vq.bundle.step);
    }

    SUBCASE("file truncated by one byte raises a corruption error") {
        std::vector<char> bytes;
        {
            std::ifstream in(path, std::ios::binary);
            bytes.assign(std::istreambuf_iterator<char>(in), {});
        }
        const std::string trunc = tmp_dir("ckpt") + "/trunc.ckpt";
        std::ofstream(trunc, std::ios::binary)
            .write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 1));
        CHECK_THROWS_AS(load_checkpoint(trunc), CorruptionError);
    }

    SUBCASE("flipped payload byte raises a digest error") {
        std::vector<char> bytes;
        {
            std::ifstream in(path, std::ios::binary);
            bytes.assign(std::istreambuf_iterator<char>(in), {});
        }
        bytes[bytes.size() - 3] ^= 0x40;
        const std::string bad = tmp_dir("ckpt") + "/bitflip.ckpt";
        std::ofstream(bad, std::ios::binary)
            .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("digest"), CorruptionError);
    }

    SUBCASE("bumped version field raises a version error") {
        CheckpointBundle bumped = vq.bundle;
        bumped.version          = kCheckpointVersion + 1;
        const std::string vpath = tmp_dir("ckpt") + "/version.ckpt";
        save_checkpoint(bumped, vpath);
        CHECK_THROWS_AS(load_checkpoint(vpath), VersionError);
    }
}

TEST_CASE("vqgan phase: determinism and codebook-derived latent range") {
    PipelineConfig cfg = small_config();
    cfg.vqgan_steps    = 6;
    DatasetManifest data = small_data("vq_det", 4, 13);

    PhaseResult a = train_vqgan_phase(data, cfg, 100);
    PhaseResult b = train_vqgan_phase(data, cfg, 100);
    CHECK(params_equal(a.bundle.params, b.bundle.params));
    CHECK(a.report.final_loss == b.report.final_loss);

    PhaseResult c = train_vqgan_phase(data, cfg, 101);
    CHECK_FALSE(params_equal(a.bundle.params, c.bundle.params));

    // latent range equals codebook_range of the stored codebook
    Codebook cb;
    cb.entries    = a.bundle.params.at("codebook");
    LatentRange r = codebook_range(cb);
    CHECK(a.bundle.latent_range.lo == r.lo);
    CHECK(a.bundle.latent_range.hi == r.hi);
}

TEST_CASE("vqgan phase reduces reconstruction error over 500 steps") {
    PipelineConfig cfg = small_config();
    cfg.volume_shape   = {32, 32, 8};
    cfg.compression.base_channels = 4;
    cfg.vqgan_steps               = 500;
    DatasetManifest data = generate_toy_dataset(16, {32, 32, 8}, 3, 17, tmp_dir("vq_500"));

    PhaseResult res = train_vqgan_phase(data, cfg, 7);
    REQUIRE(res.report.vqgan_records.size() == 500);
    // average of the first and last 10 steps
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 10; ++i) {
        first += res.report.vqgan_records[static_cast<size_t>(i)].l_rec;
        last += res.report.vqgan_records[res.report.vqgan_records.size() - 1 - i].l_rec;
    }
    CHECK(last < first);
    CHECK(res.report.codebook_entries_used > 0);
}

TEST_CASE("sdm phase: freeze contract, optimizer registry, loss trend") {
    PipelineConfig cfg = small_config();
    cfg.vqgan_steps    = 10;
    DatasetManifest data = small_data("sdm_data", 6, 19);

    PhaseResult vq = train_vqgan_phase(data, cfg, 23);
    ParamStore vq_before = vq.bundle.params;

    cfg.sdm_steps  = 40;
    PhaseResult sd = train_sdm_phase(data, vq.bundle, cfg, 29);

    SUBCASE("VQ-GAN parameters are byte-identical before and after the phase") {
        CHECK(params_equal(vq_before, vq.bundle.params));
    }

    SUBCASE("only denoiser and semantic-encoder parameters are trained") {
        for (const auto& [name, tensor] : sd.bundle.params) {
            const bool ok = name.rfind("unet.", 0) == 0 || name.rfind("sem.", 0) == 0;
            CHECK(ok);
        }
        // optimizer moments exist only for those parameters
        for (const auto& [name, step_count] : sd.bundle.optimizer_steps) {
            const bool ok = name.rfind("unet.", 0) == 0 || name.rfind("sem.", 0) == 0;
            CHECK(ok);
        }
        CHECK(!sd.bundle.optimizer_steps.empty());
    }

    SUBCASE("deterministic per seed") {
        PhaseResult sd2 = train_sdm_phase(data, vq.bundle, cfg, 29);
        CHECK(params_equal(sd.bundle.params, sd2.bundle.params));
    }

    SUBCASE("unlabeled entries are rejected") {
        DatasetManifest unlabeled = data;
        unlabeled.entries[0].map_path.clear();
        CHECK_THROWS_WITH_AS(train_sdm_phase(unlabeled, vq.bundle, cfg, 1),
                             doctest::Contains("unlabeled"), DataError);
    }
}

TEST_CASE("sdm loss decreases over 1000 steps on the toy set") {
    PipelineConfig cfg = small_config();
    cfg.vqgan_steps    = 60;
    cfg.sdm_steps      = 1000;
    DatasetManifest data = small_data("sdm_1000", 8, 31);

    PhaseResult vq = train_vqgan_phase(data, cfg, 37);
    PhaseResult sd = train_sdm_phase(data, vq.bundle, cfg, 41);
    REQUIRE(sd.report.sdm_records.size() == 1000);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 50; ++i) {
        first += sd.report.sdm_records[static_cast<size_t>(i)].l_simple;
        last += sd.report.sdm_records[sd.report.sdm_records.size() - 1 - i].l_simple;
    }
    CHECK(last < first);
}

TEST_CASE("synthesize: shape, determinism, seed sensitivity, snapshots") {
    PipelineConfig cfg = small_config();
    cfg.vqgan_steps    = 10;
    cfg.sdm_steps      = 10;
    DatasetManifest data = small_data("synth_data", 4, 43);

    PhaseResult vq = train_vqgan_phase(data, cfg, 47);
    PhaseResult sd = train_sdm_phase(data, vq.bundle, cfg, 53);

    auto samples  = load_samples(data);
    SemanticMap m = samples[0].map;

    SynthesisResult r1 = synthesize(m, vq.bundle, sd.bundle, 61);
    CHECK(r1.volume.data.shape() == std::vector<int64_t>{16, 16, 4, 1});
    CHECK(r1.volume.data.all_finite());

    SynthesisResult r2 = synthesize(m, vq.bundle, sd.bundle, 61);
    CHECK(std::memcmp(r1.volume.data.data(), r2.volume.data.data(),
                      sizeof(double) * static_cast<size_t>(r1.volume.data.numel())) == 0);

    SynthesisResult r3 = synthesize(m, vq.bundle, sd.bundle, 62);
    CHECK(sum_sq_diff(r1.volume.data, r3.volume.data) > 0.0);

    SynthesisResult snaps = synthesize(m, vq.bundle, sd.bundle, 61, 10);
    CHECK(snaps.snapshots.size() == 2);  // states at t = 20 and t = 10
    for (const auto& s : snaps.snapshots)
        CHECK(s.data.shape() == r1.volume.data.shape());

    SUBCASE("incompatible map shape is rejected") {
        SemanticMap bad = m;
        bad.H           = 15;
        bad.labels.resize(static_cast<size_t>(15 * bad.W * bad.L), 0);
        CHECK_THROWS_AS(synthesize(bad, vq.bundle, sd.bundle, 1), ShapeError);
    }

    SUBCASE("class-count mismatch is rejected") {
        SemanticMap bad    = m;
        bad.num_classes    = 5;
        CHECK_THROWS_AS(synthesize(bad, vq.bundle, sd.bundle, 1), ShapeError);
    }
}

TEST_CASE("phase outputs can be written and reloaded through out_dir") {
    PipelineConfig cfg = small_config();
    cfg.vqgan_steps    = 4;
    cfg.sdm_steps      = 4;
    DatasetManifest data = small_data("outdir_data", 3, 67);
    const std::string out = tmp_dir("outdir_run");

    PhaseResult vq = train_vqgan_phase(data, cfg, 71, out);
    CHECK(std::filesystem::exists(out + "/vqgan.ckpt"));
    CHECK(std::filesystem::exists(out + "/vqgan_records.csv"));
    {
        std::ifstream rec(out + "/vqgan_records.csv");
        std::string header;
        std::getline(rec, header);
        CHECK(header == step_report_header());
    }

    CheckpointBundle vq_re = load_checkpoint(out + "/vqgan.ckpt");
    PhaseResult sd         = train_sdm_phase(data, vq_re, cfg, 73, out);
    CHECK(std::filesystem::exists(out + "/sdm.ckpt"));
    CHECK(std::filesystem::exists(out + "/sdm_records.csv"));
    CHECK(sd.bundle.schedule_T == cfg.diffusion_T);
}
