#ifndef MEDLSDM_AUTODIFF_HPP
#define MEDLSDM_AUTODIFF_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "medlsdm/tensor.hpp"

namespace medlsdm {

// Reverse-mode tape. Ops run eagerly on Tensors and record a backward
// closure when any input requires gradients; graphs without gradient
// consumers keep no parent references, so forward-only evaluation frees
// intermediates as it goes.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated by backward()
    bool requires_grad = false;
    uint64_t id        = 0;  // creation order; consumers always have larger ids
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (!grad.defined())
            grad = Tensor::zeros(value.shape());
        return grad;
    }
};

Var make_var(Tensor value, bool requires_grad);
inline Var make_param(Tensor value) { return make_var(std::move(value), true); }
inline Var make_const(Tensor value) { return make_var(std::move(value), false); }

// Runs the reverse sweep from a scalar root (seeded with grad 1).
void backward(const Var& root);
// Runs the sweep only until every target's consumers have fired; used to
// read gradients at one layer without paying for the full graph.
void backward_partial(const Var& root, const std::vector<Var>& targets);
void zero_grads(const Var& root);

// ---- elementwise / structural ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var silu(const Var& a);
Var softplus(const Var& a);
Var sum(const Var& a);   // -> shape {1}
Var mean(const Var& a);  // -> shape {1}
inline Var sum_sq(const Var& a) { return sum(mul(a, a)); }
inline Var neg(const Var& a) { return scale(a, -1.0); }

Var div(const Var& a, const Var& b);  // elementwise a / b

// Per-site softmax / log-softmax over the channel axis of (H,W,L,C).
Var softmax_channels(const Var& x);
Var log_softmax_channels(const Var& x);

// s[c] = sum over sites of x[site, c]; result is rank-1 (C).
Var channel_sums(const Var& x);

// out[h,w,l,c] = f[h,w,l,c] * w[c] + b[c]; w and b are rank-1 (C).
Var scale_shift_channels(const Var& f, const Var& w, const Var& b);

// Rank-1 dense layer: x (Din) -> (Dout), weight (Din, Dout), bias (Dout).
Var linear(const Var& x, const Var& w, const Var& b);

struct Conv3dSpec {
    std::array<int64_t, 3> kernel{3, 3, 3};
    std::array<int64_t, 3> stride{1, 1, 1};
    std::array<int64_t, 3> pad{1, 1, 1};
};

// x (H,W,L,Cin), w (kh,kw,kl,Cin,Cout), b (Cout) -> (Ho,Wo,Lo,Cout).
Var conv3d(const Var& x, const Var& w, const Var& b, const Conv3dSpec& spec);

// Parameter-free group normalization: zero mean / unit variance per
// (group x spatial), biased variance, eps floor.
Var group_norm(const Var& x, int64_t num_groups, double eps = 1e-5);

Var upsample_nearest(const Var& x, std::array<int64_t, 3> factor);
Var concat_channels(const Var& a, const Var& b);
Var extract_slice(const Var& x, int64_t l);  // -> (H,W,1,C)

enum class AttentionMode { Spatial, CrossSlice };

// softmax(q k^T / sqrt(C)) v within each slice (Spatial: tokens are the
// H*W positions of one depth slice) or each column (CrossSlice: tokens are
// the L positions of one (h,w) site). Optionally exports the attention
// weights, one row-stochastic (tokens x tokens) matrix per group.
Var attention_core(const Var& q, const Var& k, const Var& v, AttentionMode mode,
                   std::vector<Tensor>* weights_out = nullptr);

// Value path returns codebook rows (z_q); gradient path is the identity
// into z_hat (the quantizer contributes no Jacobian).
Var straight_through(const Var& z_hat, Tensor z_q_values);

// z_q lookup with gradients scattered into the codebook rows.
// indices has one codebook row id per spatial site of `latent_shape`.
Var gather_rows(const Var& codebook, const std::vector<int32_t>& indices,
                const std::vector<int64_t>& latent_shape);

// ---- forward-only kernels (shared with non-tape callers) ----
namespace kernels {

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const Conv3dSpec& spec);
void conv3d_backward(const Tensor& x, const Tensor& w, const Conv3dSpec& spec, const Tensor& gout,
                     Tensor* gx, Tensor* gw, Tensor* gb);
Tensor group_norm_forward(const Tensor& x, int64_t num_groups, double eps);
Tensor silu_forward(const Tensor& x);
Tensor upsample_nearest_forward(const Tensor& x, std::array<int64_t, 3> factor);

}  // namespace kernels

}  // namespace medlsdm

#endif
