#ifndef MEDLSDM_RUN_CONFIG_HPP
#define MEDLSDM_RUN_CONFIG_HPP

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medlsdm/pipeline.hpp"
#include "medlsdm/seg_harness.hpp"

namespace medlsdm {

// Resolved run configuration: documented defaults, overlaid by an optional
// JSON file, overlaid by `--set key=value` entries (that precedence).
// Unknown keys and type mismatches are rejected with the offending key path.
class RunConfig {
public:
    static nlohmann::json defaults();

    static RunConfig resolve(const std::string& config_path,
                             const std::vector<std::string>& overrides,
                             std::optional<uint64_t> seed_flag = std::nullopt);

    const nlohmann::json& doc() const { return doc_; }

    uint64_t seed() const;
    std::array<int64_t, 3> volume_shape() const;
    int64_t data_num_train() const;
    int64_t data_num_test() const;
    int32_t data_num_classes() const;
    CompressionConfig compression() const;
    DenoiserConfig denoiser() const;
    PipelineConfig pipeline() const;
    SegHarnessConfig seg() const;
    int64_t metrics_feature_dim() const;
    uint64_t metrics_feature_seed() const;

    // Cross-field validation (divisibility etc.); errors name the keys.
    void validate() const;

    // Writes the fully resolved document as config.json under out_dir.
    void echo(const std::string& out_dir) const;

private:
    nlohmann::json doc_;
};

}  // namespace medlsdm

#endif
