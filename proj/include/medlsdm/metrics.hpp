#ifndef MEDLSDM_METRICS_HPP
#define MEDLSDM_METRICS_HPP

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "medlsdm/nn.hpp"
#include "medlsdm/volume.hpp"

namespace medlsdm {

// rmse = sqrt(mean (a-b)^2); psnr = 20 log10(peak / rmse), capped at 99 dB
// for identical inputs.
std::pair<double, double> rmse_psnr(const Volume& a, const Volume& b, double peak);
inline constexpr double kPsnrCap = 99.0;

// Slice-wise 2D SSIM, 7x7 Gaussian window (sigma 1.5), k1=0.01, k2=0.03,
// values rescaled from [-1, 1] to [0, 1]. Windows shrink (with a warning)
// when a slice axis is smaller than 7.
double ssim(const Volume& a, const Volume& b);

// Pluggable volumetric feature embedding for the Frechet distance.
struct FeatureExtractor {
    enum class Kind { FixedSeedRandom, Trained, External };
    Kind kind = Kind::FixedSeedRandom;
    std::vector<nn::Conv3d> layers;
    ParamStore params;
    int64_t feature_dim = 64;

    static FeatureExtractor fixed_random(int64_t cin, int64_t feature_dim, uint64_t seed);
    static FeatureExtractor from_params(std::vector<nn::Conv3d> layers, ParamStore params,
                                        int64_t feature_dim, Kind kind);

    Tensor embed(const Volume& v) const;  // (feature_dim)
};

struct GaussianSummary {
    Tensor mean;  // (d)
    Tensor cov;   // (d, d), n-1 denominator
    int64_t n = 0;
};

GaussianSummary extract_features(const std::vector<Volume>& volumes,
                                 const FeatureExtractor& extractor);

// ||mu_p - mu_q||^2 + Tr(Sp + Sq - 2 (Sp Sq)^{1/2}); the cross term uses
// the symmetric form sqrt(Sp)^T Sq sqrt(Sp) with negative eigenvalues
// clipped at zero. Result clamped to >= 0.
double frechet_distance(const GaussianSummary& p, const GaussianSummary& q);

// Symmetric eigendecomposition (cyclic Jacobi). Exposed for reuse and for
// oracle-style verification in tests.
void symmetric_eigen(const Tensor& a, Tensor& eigenvalues, Tensor& eigenvectors);

struct DiceResult {
    std::vector<double> per_class;
    double mean = 0.0;  // over classes present in gt
};

// 2|P^G| / (|P|+|G|) per class; 1.0 when both are empty.
DiceResult dice(const SemanticMap& pred, const SemanticMap& gt);

// `metric,dataset,value` rows.
void write_metric_summary(const std::string& path,
                          const std::vector<std::tuple<std::string, std::string, double>>& rows);

}  // namespace medlsdm

#endif
