#include "medlsdm/nn.hpp"

#include <cmath>

namespace medlsdm {

ParamMap wrap_params(const ParamStore& store, bool requires_grad) {
    ParamMap pm;
    for (const auto& [name, tensor] : store)
        pm.emplace(name, make_var(tensor, requires_grad));  // shares storage
    return pm;
}

int64_t param_count(const ParamStore& store) {
    int64_t n = 0;
    for (const auto& [name, tensor] : store)
        n += tensor.numel();
    return n;
}

void snap_to_f32(ParamStore& store) {
    for (auto& [name, tensor] : store)
        for (int64_t i = 0; i < tensor.numel(); ++i)
            tensor[i] = static_cast<double>(static_cast<float>(tensor[i]));
}

namespace nn {

const Var& param(const ParamMap& pm, const std::string& name) {
    auto it = pm.find(name);
    if (it == pm.end())
        throw ConfigError("missing parameter: " + name);
    return it->second;
}

const Tensor& param(const ParamStore& ps, const std::string& name) {
    auto it = ps.find(name);
    if (it == ps.end())
        throw ConfigError("missing parameter: " + name);
    return it->second;
}

void Conv3d::init(ParamStore& ps, Rng& rng) const {
    const int64_t fan_in = spec.kernel[0] * spec.kernel[1] * spec.kernel[2] * cin;
    Tensor w({spec.kernel[0], spec.kernel[1], spec.kernel[2], cin, cout});
    if (init_kind == Init::HeNormal) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (int64_t i = 0; i < w.numel(); ++i)
            w[i] = stddev * rng.normal();
    }
    ps[name + ".w"] = std::move(w);
    ps[name + ".b"] = Tensor({cout});
}

Var Conv3d::operator()(const ParamMap& pm, const Var& x) const {
    return conv3d(x, param(pm, name + ".w"), param(pm, name + ".b"), spec);
}

Tensor Conv3d::forward(const ParamStore& ps, const Tensor& x) const {
    return kernels::conv3d_forward(x, param(ps, name + ".w"), param(ps, name + ".b"), spec);
}

void Linear::init(ParamStore& ps, Rng& rng) const {
    Tensor w({din, dout});
    if (init_kind == Init::HeNormal) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(din));
        for (int64_t i = 0; i < w.numel(); ++i)
            w[i] = stddev * rng.normal();
    }
    ps[name + ".w"] = std::move(w);
    ps[name + ".b"] = Tensor({dout});
}

Var Linear::operator()(const ParamMap& pm, const Var& x) const {
    return linear(x, param(pm, name + ".w"), param(pm, name + ".b"));
}

}  // namespace nn

void Adam::step_tensor(const std::string& name, Tensor& p, const Tensor& g) {
    auto& mo = state_[name];
    if (!mo.m.defined()) {
        mo.m = Tensor::zeros(p.shape());
        mo.v = Tensor::zeros(p.shape());
    }
    mo.t += 1;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(mo.t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(mo.t));
    for (int64_t i = 0; i < p.numel(); ++i) {
        mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * g[i];
        mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = mo.m[i] / bc1;
        const double vhat = mo.v[i] / bc2;
        p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
}

void Adam::step(ParamStore& store, const ParamMap& wrapped) {
    for (auto& [name, p] : store) {
        auto it = wrapped.find(name);
        if (it == wrapped.end() || !it->second->grad.defined())
            continue;
        step_tensor(name, p, it->second->grad);
    }
}

std::vector<std::string> Adam::registered_params() const {
    std::vector<std::string> names;
    names.reserve(state_.size());
    for (const auto& [name, mo] : state_)
        names.push_back(name);
    return names;
}

}  // namespace medlsdm
