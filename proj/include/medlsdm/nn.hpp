#ifndef MEDLSDM_NN_HPP
#define MEDLSDM_NN_HPP

#include <map>
#include <string>

#include "medlsdm/autodiff.hpp"
#include "medlsdm/rng.hpp"
#include "medlsdm/tensor.hpp"

namespace medlsdm {

// Named parameter tensors. std::map keeps iteration (and therefore
// optimizer updates and checkpoint layout) in a fixed order.
using ParamStore = std::map<std::string, Tensor>;

// Per-forward-pass wrapping of parameters into graph leaves.
using ParamMap = std::map<std::string, Var>;

ParamMap wrap_params(const ParamStore& store, bool requires_grad);
int64_t param_count(const ParamStore& store);

// Rounds every parameter to float32 precision in place, the storage
// precision of checkpoints; keeps in-memory and reloaded forward passes
// bit-identical.
void snap_to_f32(ParamStore& store);

namespace nn {

enum class Init { HeNormal, Zero };

struct Conv3d {
    std::string name;
    int64_t cin = 0, cout = 0;
    Conv3dSpec spec;
    Init init_kind = Init::HeNormal;

    Conv3d() = default;
    Conv3d(std::string n, int64_t ci, int64_t co, std::array<int64_t, 3> kernel,
           std::array<int64_t, 3> stride = {1, 1, 1}, Init ik = Init::HeNormal)
        : name(std::move(n)), cin(ci), cout(co), init_kind(ik) {
        spec.kernel = kernel;
        spec.stride = stride;
        // 'same'-style padding: floor(k/2) per axis.
        spec.pad = {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2};
    }

    void init(ParamStore& ps, Rng& rng) const;
    Var operator()(const ParamMap& pm, const Var& x) const;
    Tensor forward(const ParamStore& ps, const Tensor& x) const;
    int64_t num_params() const {
        return spec.kernel[0] * spec.kernel[1] * spec.kernel[2] * cin * cout + cout;
    }
};

struct Linear {
    std::string name;
    int64_t din = 0, dout = 0;
    Init init_kind = Init::HeNormal;

    Linear() = default;
    Linear(std::string n, int64_t i, int64_t o, Init ik = Init::HeNormal)
        : name(std::move(n)), din(i), dout(o), init_kind(ik) {}

    void init(ParamStore& ps, Rng& rng) const;
    Var operator()(const ParamMap& pm, const Var& x) const;
};

const Var& param(const ParamMap& pm, const std::string& name);
const Tensor& param(const ParamStore& ps, const std::string& name);

}  // namespace nn

// Adam with bias correction. Moment buffers are keyed by parameter name and
// created on first use.
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Applies one descent step: p -= update(grad). Gradients are read from
    // the wrapped Vars of the current graph; params without grads are skipped.
    void step(ParamStore& store, const ParamMap& wrapped);
    void step_tensor(const std::string& name, Tensor& p, const Tensor& g);

    double lr() const { return lr_; }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }

    // Names with allocated moment buffers (the optimizer's registry).
    std::vector<std::string> registered_params() const;

    struct Moments {
        Tensor m, v;
        int64_t t = 0;
    };
    std::map<std::string, Moments>& state() { return state_; }
    const std::map<std::string, Moments>& state() const { return state_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::map<std::string, Moments> state_;
};

}  // namespace medlsdm

#endif
