#ifndef MEDLSDM_SEG_HARNESS_HPP
#define MEDLSDM_SEG_HARNESS_HPP

#include <map>
#include <string>
#include <vector>

#include "medlsdm/metrics.hpp"
#include "medlsdm/nn.hpp"
#include "medlsdm/volume.hpp"

namespace medlsdm {

// Mask-faithfulness segmentation harness settings. Defaults mirror the
// reference U-Net3D configuration; desk-scale runs override classes and
// patch size.
struct SegHarnessConfig {
    int32_t classes     = 2;
    int64_t in_channels = 1;
    int64_t kernel      = 3;
    double lr           = 5e-5;
    double beta1        = 0.9;
    double beta2        = 0.999;
    int64_t batch_size  = 4;
    std::array<int64_t, 3> patch{64, 64, 64};
    int64_t epochs        = 10;
    int64_t base_channels = 16;

    void validate() const;
};

// Small 3D U-Net with instance normalization, trained with Dice + cross
// entropy.
class SegNet {
public:
    SegNet(const SegHarnessConfig& cfg, uint64_t seed);

    Var logits(const ParamMap& pm, const Var& x) const;
    SemanticMap predict(const Tensor& x) const;  // argmax labels
    Var loss(const ParamMap& pm, const Var& x, const Tensor& onehot_gt) const;

    ParamStore& params() { return params_; }
    const SegHarnessConfig& config() const { return cfg_; }

private:
    Var norm_act(const Var& x) const;
    SegHarnessConfig cfg_;
    ParamStore params_;
    std::map<std::string, nn::Conv3d> convs_;
};

enum class DataTag { RealTrain, RealTest, Synthetic };
std::string to_string(DataTag tag);

struct FaithfulnessResult {
    DiceResult real_train;
    DiceResult real_test;
    DiceResult synthetic;
    // Batches the segmentation network consumed during training, keyed by
    // provenance; everything except real-train must be zero.
    std::map<std::string, int64_t> training_batch_tags;
};

// Trains one segmentation network on real_train only, then evaluates Dice
// on all three sets. synth entries pair generated volumes with the test
// maps. Deterministic per seed.
FaithfulnessResult faithfulness_harness(const std::vector<PairedSample>& real_train,
                                        const std::vector<PairedSample>& real_test,
                                        const std::vector<PairedSample>& synth,
                                        const SegHarnessConfig& cfg, uint64_t seed);

}  // namespace medlsdm

#endif
