#include "medlsdm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include "medlsdm/errors.hpp"

namespace medlsdm {

std::pair<double, double> rmse_psnr(const Volume& a, const Volume& b, double peak) {
    check_same_shape(a.data, b.data, "rmse_psnr");
    if (!(peak > 0.0))
        throw DomainError("rmse_psnr: peak must be positive");
    const double rmse = std::sqrt(mean_sq_diff(a.data, b.data));
    double psnr       = rmse == 0.0 ? kPsnrCap : 20.0 * std::log10(peak / rmse);
    psnr              = std::min(psnr, kPsnrCap);
    return {rmse, psnr};
}

namespace {

std::vector<double> gaussian_window(int64_t size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size));
    const double c = (static_cast<double>(size) - 1.0) / 2.0;
    double total   = 0.0;
    for (int64_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - c;
        w[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += w[static_cast<size_t>(i)];
    }
    for (double& x : w)
        x /= total;
    return w;
}

}  // namespace

double ssim(const Volume& a, const Volume& b) {
    check_same_shape(a.data, b.data, "ssim");
    const int64_t H = a.data.dim(0), W = a.data.dim(1), L = a.data.dim(2), C = a.data.dim(3);

    int64_t win = 7;
    if (H < win || W < win) {
        win = std::min({H, W, win});
        if (win % 2 == 0)
            --win;
        win = std::max<int64_t>(win, 1);
        std::cerr << "[medlsdm] ssim: slice axis smaller than 7, shrinking window to " << win
                  << "\n";
    }
    const auto g = gaussian_window(win, 1.5);

    constexpr double k1 = 0.01, k2 = 0.03, peak = 1.0;
    const double c1 = (k1 * peak) * (k1 * peak);
    const double c2 = (k2 * peak) * (k2 * peak);

    // [-1, 1] -> [0, 1]
    const auto px = [](double v) { return (v + 1.0) * 0.5; };

    double total   = 0.0;
    int64_t count  = 0;
    const int64_t ho = H - win + 1, wo = W - win + 1;
    for (int64_t l = 0; l < L; ++l)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < ho; ++i)
                for (int64_t j = 0; j < wo; ++j) {
                    double ma = 0, mb = 0, va = 0, vb = 0, vab = 0;
                    for (int64_t u = 0; u < win; ++u)
                        for (int64_t v = 0; v < win; ++v) {
                            const double wgt = g[static_cast<size_t>(u)] *
                                               g[static_cast<size_t>(v)];
                            const double xa = px(a.data.at(i + u, j + v, l, c));
                            const double xb = px(b.data.at(i + u, j + v, l, c));
                            ma += wgt * xa;
                            mb += wgt * xb;
                            va += wgt * xa * xa;
                            vb += wgt * xb * xb;
                            vab += wgt * xa * xb;
                        }
                    va -= ma * ma;
                    vb -= mb * mb;
                    vab -= ma * mb;
                    const double num = (2.0 * ma * mb + c1) * (2.0 * vab + c2);
                    const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                    total += num / den;
                    ++count;
                }
    return total / static_cast<double>(count);
}

// ---------------- features / Frechet ----------------

FeatureExtractor FeatureExtractor::fixed_random(int64_t cin, int64_t feature_dim, uint64_t seed) {
    FeatureExtractor ex;
    ex.kind        = Kind::FixedSeedRandom;
    ex.feature_dim = feature_dim;
    Rng rng(seed);
    using A3 = std::array<int64_t, 3>;
    ex.layers.emplace_back("feat.c0", cin, 8, A3{3, 3, 3}, A3{2, 2, 2});
    ex.layers.emplace_back("feat.c1", 8, 16, A3{3, 3, 3}, A3{2, 2, 2});
    ex.layers.emplace_back("feat.c2", 16, 32, A3{3, 3, 3}, A3{2, 2, 2});
    ex.layers.emplace_back("feat.c3", 32, feature_dim, A3{3, 3, 3});
    for (const auto& l : ex.layers)
        l.init(ex.params, rng);
    return ex;
}

FeatureExtractor FeatureExtractor::from_params(std::vector<nn::Conv3d> layers, ParamStore params,
                                               int64_t feature_dim, Kind kind) {
    FeatureExtractor ex;
    ex.kind        = kind;
    ex.layers      = std::move(layers);
    ex.params      = std::move(params);
    ex.feature_dim = feature_dim;
    return ex;
}

Tensor FeatureExtractor::embed(const Volume& v) const {
    Tensor h = v.data;
    for (size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(params, h);
        if (i + 1 < layers.size())
            h = kernels::silu_forward(h);
    }
    // global average pool
    const int64_t C     = h.dim(3);
    const int64_t sites = h.numel() / C;
    Tensor out({feature_dim});
    if (C != feature_dim)
        throw ConfigError("feature extractor: final channels != feature_dim");
    for (int64_t s = 0; s < sites; ++s)
        for (int64_t c = 0; c < C; ++c)
            out[c] += h[s * C + c];
    for (int64_t c = 0; c < C; ++c)
        out[c] /= static_cast<double>(sites);
    return out;
}

GaussianSummary extract_features(const std::vector<Volume>& volumes,
                                 const FeatureExtractor& extractor) {
    const int64_t n = static_cast<int64_t>(volumes.size());
    if (n < 2)
        throw DataError("extract_features: need at least 2 volumes, got " + std::to_string(n));
    const int64_t d = extractor.feature_dim;

    std::vector<Tensor> feats;
    feats.reserve(static_cast<size_t>(n));
    for (const auto& v : volumes)
        feats.push_back(extractor.embed(v));

    GaussianSummary s;
    s.n    = n;
    s.mean = Tensor({d});
    for (const auto& f : feats)
        axpy(s.mean, 1.0, f);
    for (int64_t i = 0; i < d; ++i)
        s.mean[i] /= static_cast<double>(n);

    s.cov = Tensor({d, d});
    for (const auto& f : feats)
        for (int64_t i = 0; i < d; ++i) {
            const double di = f[i] - s.mean[i];
            for (int64_t j = 0; j < d; ++j)
                s.cov[i * d + j] += di * (f[j] - s.mean[j]);
        }
    const double denom = static_cast<double>(n - 1);
    for (int64_t i = 0; i < d * d; ++i)
        s.cov[i] /= denom;
    return s;
}

void symmetric_eigen(const Tensor& a, Tensor& eigenvalues, Tensor& eigenvectors) {
    const int64_t n = a.dim(0);
    if (a.rank() != 2 || a.dim(1) != n)
        throw ShapeError("symmetric_eigen: square matrix required");
    Tensor m = a.clone();
    eigenvectors = Tensor({n, n});
    for (int64_t i = 0; i < n; ++i)
        eigenvectors[i * n + i] = 1.0;

    // Cyclic Jacobi sweeps.
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q)
                off += m[p * n + q] * m[p * n + q];
        if (off < 1e-26)
            break;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = m[p * n + q];
                if (std::abs(apq) < 1e-300)
                    continue;
                const double app = m[p * n + p];
                const double aqq = m[q * n + q];
                const double tau = (aqq - app) / (2.0 * apq);
                const double t   = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double mkp = m[k * n + p], mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double mpk = m[p * n + k], mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double vkp = eigenvectors[k * n + p];
                    const double vkq = eigenvectors[k * n + q];
                    eigenvectors[k * n + p] = c * vkp - s * vkq;
                    eigenvectors[k * n + q] = s * vkp + c * vkq;
                }
            }
    }
    eigenvalues = Tensor({n});
    for (int64_t i = 0; i < n; ++i)
        eigenvalues[i] = m[i * n + i];
}

namespace {

// V diag(sqrt(max(lambda, 0))) V^T
Tensor sqrtm_psd(const Tensor& a) {
    const int64_t n = a.dim(0);
    Tensor evals, evecs;
    symmetric_eigen(a, evals, evecs);
    Tensor out({n, n});
    for (int64_t k = 0; k < n; ++k) {
        const double s = std::sqrt(std::max(evals[k], 0.0));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j)
                out[i * n + j] += s * evecs[i * n + k] * evecs[j * n + k];
    }
    return out;
}

void check_covariance(const Tensor& cov, const char* which) {
    const int64_t n = cov.dim(0);
    double scale    = 1.0;
    for (int64_t i = 0; i < n; ++i)
        scale = std::max(scale, std::abs(cov[i * n + i]));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j)
            if (std::abs(cov[i * n + j] - cov[j * n + i]) > 1e-8 * scale)
                throw DataError(std::string("frechet_distance: ") + which +
                                " covariance not symmetric");
    Tensor evals, evecs;
    symmetric_eigen(cov, evals, evecs);
    for (int64_t i = 0; i < n; ++i)
        if (evals[i] < -1e-6 * scale)
            throw DataError(std::string("frechet_distance: ") + which +
                            " covariance not PSD beyond tolerance");
}

}  // namespace

double frechet_distance(const GaussianSummary& p, const GaussianSummary& q) {
    const int64_t d = p.mean.numel();
    if (q.mean.numel() != d)
        throw ShapeError("frechet_distance: feature dimensions differ");
    check_covariance(p.cov, "first");
    check_covariance(q.cov, "second");

    double mean_term = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double diff = p.mean[i] - q.mean[i];
        mean_term += diff * diff;
    }

    double tr_p = 0.0, tr_q = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        tr_p += p.cov[i * d + i];
        tr_q += q.cov[i * d + i];
    }

    // Tr((Sp Sq)^{1/2}) via the symmetric product sqrt(Sp) Sq sqrt(Sp).
    Tensor root_p = sqrtm_psd(p.cov);
    Tensor inner({d, d});
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < d; ++k)
                for (int64_t l = 0; l < d; ++l)
                    acc += root_p[i * d + k] * q.cov[k * d + l] * root_p[l * d + j];
            inner[i * d + j] = acc;
        }
    // enforce exact symmetry before the eigen solve
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = i + 1; j < d; ++j) {
            const double avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    Tensor evals, evecs;
    symmetric_eigen(inner, evals, evecs);
    double tr_cross = 0.0;
    for (int64_t i = 0; i < d; ++i)
        tr_cross += std::sqrt(std::max(evals[i], 0.0));

    const double result = mean_term + tr_p + tr_q - 2.0 * tr_cross;
    return std::max(result, 0.0);
}

// ---------------- dice ----------------

DiceResult dice(const SemanticMap& pred, const SemanticMap& gt) {
    if (pred.H != gt.H || pred.W != gt.W || pred.L != gt.L)
        throw ShapeError("dice: map shapes differ");
    if (pred.num_classes != gt.num_classes)
        throw DataError("dice: class counts differ");

    const int32_t nc = gt.num_classes;
    std::vector<int64_t> inter(static_cast<size_t>(nc), 0);
    std::vector<int64_t> psz(static_cast<size_t>(nc), 0);
    std::vector<int64_t> gsz(static_cast<size_t>(nc), 0);
    for (size_t i = 0; i < gt.labels.size(); ++i) {
        const int32_t pl = pred.labels[i], gl = gt.labels[i];
        ++psz[static_cast<size_t>(pl)];
        ++gsz[static_cast<size_t>(gl)];
        if (pl == gl)
            ++inter[static_cast<size_t>(gl)];
    }

    DiceResult r;
    r.per_class.resize(static_cast<size_t>(nc));
    double sum      = 0.0;
    int64_t present = 0;
    for (int32_t c = 0; c < nc; ++c) {
        const int64_t denom = psz[static_cast<size_t>(c)] + gsz[static_cast<size_t>(c)];
        const double score =
            denom == 0 ? 1.0
                       : 2.0 * static_cast<double>(inter[static_cast<size_t>(c)]) /
                             static_cast<double>(denom);
        r.per_class[static_cast<size_t>(c)] = score;
        if (gsz[static_cast<size_t>(c)] > 0) {
            sum += score;
            ++present;
        }
    }
    r.mean = present > 0 ? sum / static_cast<double>(present) : 1.0;
    return r;
}

void write_metric_summary(const std::string& path,
                          const std::vector<std::tuple<std::string, std::string, double>>& rows) {
    std::ofstream out(path);
    if (!out)
        throw DataError("metric summary: cannot open " + path);
    out << "metric,dataset,value\n";
    out.precision(10);
    for (const auto& [metric, dataset, value] : rows)
        out << metric << "," << dataset << "," << value << "\n";
}

}  // namespace medlsdm
