#ifndef MEDLSDM_PIPELINE_HPP
#define MEDLSDM_PIPELINE_HPP

#include <optional>
#include <string>
#include <vector>

#include "medlsdm/denoiser.hpp"
#include "medlsdm/diffusion.hpp"
#include "medlsdm/latent_space.hpp"
#include "medlsdm/vqgan.hpp"
#include "medlsdm/volume.hpp"

namespace medlsdm {

inline constexpr int32_t kCheckpointVersion = 1;

// Self-describing container for either training phase: parameter arrays
// (float32 storage precision), configs, schedule settings, latent range,
// optimizer moments, and the seed/step provenance.
struct CheckpointBundle {
    int32_t version = kCheckpointVersion;
    std::string phase;  // "vqgan" | "sdm"
    uint64_t seed = 0;
    int64_t step  = 0;

    CompressionConfig compression;
    DenoiserConfig denoiser;  // meaningful for the sdm phase
    int64_t schedule_T = 0;   // sdm phase
    double schedule_s  = 0.008;
    LatentRange latent_range;

    ParamStore params;
    ParamStore optimizer_moments;           // "adam.m.<p>", "adam.v.<p>"
    std::map<std::string, int64_t> optimizer_steps;
};

// Archive layout: magic, version, JSON metadata (shapes, offsets, per-array
// digests), then raw little-endian float32 arrays. Writes are atomic
// (temp file + rename).
void save_checkpoint(const CheckpointBundle& bundle, const std::string& path);
CheckpointBundle load_checkpoint(const std::string& path);

VqGan vqgan_from_bundle(const CheckpointBundle& bundle);
Denoiser denoiser_from_bundle(const CheckpointBundle& bundle);

struct SdmStepRecord {
    int64_t step  = 0;
    double l_simple = 0.0;
};

struct TrainReport {
    std::vector<StepReport> vqgan_records;
    std::vector<SdmStepRecord> sdm_records;
    double wall_seconds  = 0.0;
    double final_loss    = 0.0;
    int64_t codebook_entries_used = 0;  // vqgan phase observability
};

struct PipelineConfig {
    std::array<int64_t, 3> volume_shape{32, 32, 8};
    CompressionConfig compression;
    DenoiserConfig denoiser;
    int64_t diffusion_T = 300;
    double cosine_s     = 0.008;

    int64_t vqgan_steps = 2000;
    int64_t vqgan_batch = 2;
    VqGanTrainConfig vqgan_train;

    int64_t sdm_steps = 5000;
    int64_t sdm_batch = 2;
    double sdm_lr     = 3e-4;

    void validate() const;
};

struct PhaseResult {
    CheckpointBundle bundle;
    TrainReport report;
};

// Phase 1: self-supervised VQ-GAN training (maps not required). On
// divergence the last-good checkpoint is written to out_dir (when given)
// before the error propagates.
PhaseResult train_vqgan_phase(const DatasetManifest& manifest, const PipelineConfig& cfg,
                              uint64_t seed, const std::string& out_dir = "");

// Phase 2: frozen VQ-GAN, paired data required; trains only the semantic
// map encoder and the denoising U-Net.
PhaseResult train_sdm_phase(const DatasetManifest& manifest, const CheckpointBundle& vqgan_ckpt,
                            const PipelineConfig& cfg, uint64_t seed,
                            const std::string& out_dir = "");

struct SynthesisResult {
    Volume volume;
    std::vector<Volume> snapshots;
    std::vector<int64_t> snapshot_steps;
};

// Map-conditioned generation; no image input exists anywhere in this path.
SynthesisResult synthesize(const SemanticMap& m, const CheckpointBundle& vqgan_ckpt,
                           const CheckpointBundle& sdm_ckpt, uint64_t seed,
                           std::optional<int64_t> snapshot_every = std::nullopt);

}  // namespace medlsdm

#endif
