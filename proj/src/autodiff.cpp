#include "medlsdm/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace medlsdm {

namespace {

std::atomic<uint64_t> g_next_node_id{1};

bool any_requires_grad(std::initializer_list<const Var*> vars) {
    for (const Var* v : vars)
        if (*v && (*v)->requires_grad)
            return true;
    return false;
}

// Attaches tape metadata only when gradients can flow.
Var finish_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto node   = std::make_shared<Node>();
    node->value = std::move(value);
    node->id    = g_next_node_id.fetch_add(1);
    bool need   = false;
    for (const auto& p : parents)
        if (p && p->requires_grad)
            need = true;
    node->requires_grad = need;
    if (need) {
        node->parents     = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return node;
}

std::vector<Node*> reachable_sorted_desc(const Var& root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p && p->requires_grad && seen.insert(p.get()).second)
                stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    return order;
}

}  // namespace

Var make_var(Tensor value, bool requires_grad) {
    auto node           = std::make_shared<Node>();
    node->value         = std::move(value);
    node->requires_grad = requires_grad;
    node->id            = g_next_node_id.fetch_add(1);
    return node;
}

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw ShapeError("backward: root must be scalar, got " + shape_str(root->value.shape()));
    auto order = reachable_sorted_desc(root);
    root->ensure_grad()[0] = 1.0;
    for (Node* n : order)
        if (n->backward_fn && n->grad.defined())
            n->backward_fn(*n);
}

void backward_partial(const Var& root, const std::vector<Var>& targets) {
    if (root->value.numel() != 1)
        throw ShapeError("backward_partial: root must be scalar");
    auto order = reachable_sorted_desc(root);

    // Consumer counts within the reachable set, per target.
    std::unordered_map<Node*, int> pending;
    for (const auto& t : targets)
        pending[t.get()] = 0;
    for (Node* n : order)
        for (const auto& p : n->parents) {
            auto it = pending.find(p.get());
            if (it != pending.end())
                ++it->second;
        }

    root->ensure_grad()[0] = 1.0;
    int open               = 0;
    for (auto& kv : pending)
        if (kv.second > 0)
            ++open;
    if (open == 0)
        return;  // targets unreachable; their grads stay zero
    for (Node* n : order) {
        if (n->backward_fn && n->grad.defined())
            n->backward_fn(*n);
        for (const auto& p : n->parents) {
            auto it = pending.find(p.get());
            if (it != pending.end() && --it->second == 0 && --open == 0)
                return;
        }
    }
}

void zero_grads(const Var& root) {
    for (Node* n : reachable_sorted_desc(root))
        if (n->grad.defined())
            n->grad.zero();
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
    Tensor out = medlsdm::add(a->value, b->value);
    return finish_node(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad)
            axpy(a->ensure_grad(), 1.0, self.grad);
        if (b->requires_grad)
            axpy(b->ensure_grad(), 1.0, self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    Tensor out = medlsdm::sub(a->value, b->value);
    return finish_node(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad)
            axpy(a->ensure_grad(), 1.0, self.grad);
        if (b->requires_grad)
            axpy(b->ensure_grad(), -1.0, self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    Tensor out = medlsdm::mul(a->value, b->value);
    return finish_node(std::move(out), {a, b}, [a, b](Node& self) {
        const int64_t n = self.grad.numel();
        if (a->requires_grad) {
            Tensor& ga = a->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                ga[i] += self.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                gb[i] += self.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = medlsdm::scale(a->value, s);
    return finish_node(std::move(out), {a}, [a, s](Node& self) {
        if (a->requires_grad)
            axpy(a->ensure_grad(), s, self.grad);
    });
}

Var silu(const Var& a) {
    Tensor out = kernels::silu_forward(a->value);
    return finish_node(std::move(out), {a}, [a](Node& self) {
        if (!a->requires_grad)
            return;
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            const double x   = a->value[i];
            const double sig = 1.0 / (1.0 + std::exp(-x));
            ga[i] += self.grad[i] * sig * (1.0 + x * (1.0 - sig));
        }
    });
}

Var softplus(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double x = a->value[i];
        out[i]         = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    return finish_node(std::move(out), {a}, [a](Node& self) {
        if (!a->requires_grad)
            return;
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            ga[i] += self.grad[i] / (1.0 + std::exp(-a->value[i]));
    });
}

Var sum(const Var& a) {
    Tensor out({1});
    out[0] = a->value.sum();
    return finish_node(std::move(out), {a}, [a](Node& self) {
        if (a->requires_grad) {
            Tensor& ga     = a->ensure_grad();
            const double g = self.grad[0];
            for (int64_t i = 0; i < ga.numel(); ++i)
                ga[i] += g;
        }
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a->value.numel());
    Tensor out({1});
    out[0] = a->value.sum() / n;
    return finish_node(std::move(out), {a}, [a, n](Node& self) {
        if (a->requires_grad) {
            Tensor& ga     = a->ensure_grad();
            const double g = self.grad[0] / n;
            for (int64_t i = 0; i < ga.numel(); ++i)
                ga[i] += g;
        }
    });
}

Var div(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "div");
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = a->value[i] / b->value[i];
    return finish_node(std::move(out), {a, b}, [a, b](Node& self) {
        const int64_t n = self.grad.numel();
        if (a->requires_grad) {
            Tensor& ga = a->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                ga[i] += self.grad[i] / b->value[i];
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                gb[i] -= self.grad[i] * a->value[i] / (b->value[i] * b->value[i]);
        }
    });
}

Var softmax_channels(const Var& x) {
    const int64_t C     = x->value.shape().back();
    const int64_t sites = x->value.numel() / C;
    Tensor out(x->value.shape());
    for (int64_t s = 0; s < sites; ++s) {
        double mx = -1e300;
        for (int64_t c = 0; c < C; ++c)
            mx = std::max(mx, x->value[s * C + c]);
        double z = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            const double e = std::exp(x->value[s * C + c] - mx);
            out[s * C + c] = e;
            z += e;
        }
        for (int64_t c = 0; c < C; ++c)
            out[s * C + c] /= z;
    }
    Var result = finish_node(out, {x}, nullptr);
    if (!result->requires_grad)
        return result;
    Tensor y = out;
    result->backward_fn = [x, y, sites, C](Node& self) {
        if (!x->requires_grad)
            return;
        Tensor& gx = x->ensure_grad();
        for (int64_t s = 0; s < sites; ++s) {
            double gdoty = 0.0;
            for (int64_t c = 0; c < C; ++c)
                gdoty += self.grad[s * C + c] * y[s * C + c];
            for (int64_t c = 0; c < C; ++c)
                gx[s * C + c] += y[s * C + c] * (self.grad[s * C + c] - gdoty);
        }
    };
    return result;
}

Var log_softmax_channels(const Var& x) {
    const int64_t C     = x->value.shape().back();
    const int64_t sites = x->value.numel() / C;
    Tensor out(x->value.shape());
    for (int64_t s = 0; s < sites; ++s) {
        double mx = -1e300;
        for (int64_t c = 0; c < C; ++c)
            mx = std::max(mx, x->value[s * C + c]);
        double z = 0.0;
        for (int64_t c = 0; c < C; ++c)
            z += std::exp(x->value[s * C + c] - mx);
        const double lse = mx + std::log(z);
        for (int64_t c = 0; c < C; ++c)
            out[s * C + c] = x->value[s * C + c] - lse;
    }
    Var result = finish_node(out, {x}, nullptr);
    if (!result->requires_grad)
        return result;
    Tensor logp = out;
    result->backward_fn = [x, logp, sites, C](Node& self) {
        if (!x->requires_grad)
            return;
        Tensor& gx = x->ensure_grad();
        for (int64_t s = 0; s < sites; ++s) {
            double gsum = 0.0;
            for (int64_t c = 0; c < C; ++c)
                gsum += self.grad[s * C + c];
            for (int64_t c = 0; c < C; ++c)
                gx[s * C + c] += self.grad[s * C + c] - std::exp(logp[s * C + c]) * gsum;
        }
    };
    return result;
}

Var channel_sums(const Var& x) {
    const int64_t C     = x->value.shape().back();
    const int64_t sites = x->value.numel() / C;
    Tensor out({C});
    for (int64_t s = 0; s < sites; ++s)
        for (int64_t c = 0; c < C; ++c)
            out[c] += x->value[s * C + c];
    return finish_node(std::move(out), {x}, [x, sites, C](Node& self) {
        if (!x->requires_grad)
            return;
        Tensor& gx = x->ensure_grad();
        for (int64_t s = 0; s < sites; ++s)
            for (int64_t c = 0; c < C; ++c)
                gx[s * C + c] += self.grad[c];
    });
}

Var scale_shift_channels(const Var& f, const Var& w, const Var& b) {
    const auto& fs  = f->value.shape();
    const int64_t C = fs[3];
    if (w->value.numel() != C || b->value.numel() != C)
        throw ShapeError("scale_shift_channels: w/b must have C entries");
    Tensor out(fs);
    const int64_t sites = f->value.numel() / C;
    for (int64_t s = 0; s < sites; ++s)
        for (int64_t c = 0; c < C; ++c)
            out[s * C + c] = f->value[s * C + c] * w->value[c] + b->value[c];
    return finish_node(std::move(out), {f, w, b}, [f, w, b, sites, C](Node& self) {
        if (f->requires_grad) {
            Tensor& gf = f->ensure_grad();
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < C; ++c)
                    gf[s * C + c] += self.grad[s * C + c] * w->value[c];
        }
        if (w->requires_grad) {
            Tensor& gw = w->ensure_grad();
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < C; ++c)
                    gw[c] += self.grad[s * C + c] * f->value[s * C + c];
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < C; ++c)
                    gb[c] += self.grad[s * C + c];
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const int64_t din  = x->value.numel();
    const int64_t dout = b->value.numel();
    if (w->value.numel() != din * dout)
        throw ShapeError("linear: weight shape mismatch");
    Tensor out({dout});
    for (int64_t j = 0; j < dout; ++j) {
        double acc = b->value[j];
        for (int64_t i = 0; i < din; ++i)
            acc += x->value[i] * w->value[i * dout + j];
        out[j] = acc;
    }
    return finish_node(std::move(out), {x, w, b}, [x, w, b, din, dout](Node& self) {
        if (x->requires_grad) {
            Tensor& gx = x->ensure_grad();
            for (int64_t i = 0; i < din; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < dout; ++j)
                    acc += self.grad[j] * w->value[i * dout + j];
                gx[i] += acc;
            }
        }
        if (w->requires_grad) {
            Tensor& gw = w->ensure_grad();
            for (int64_t i = 0; i < din; ++i)
                for (int64_t j = 0; j < dout; ++j)
                    gw[i * dout + j] += x->value[i] * self.grad[j];
        }
        if (b->requires_grad)
            axpy(b->ensure_grad(), 1.0, self.grad);
    });
}

// ---------------- convolution ----------------

namespace kernels {

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const Conv3dSpec& spec) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 5)
        throw ShapeError("conv3d: expects rank-4 input, rank-5 weight");
    const int64_t H = xs[0], W = xs[1], L = xs[2], Cin = xs[3];
    const int64_t kh = ws[0], kw = ws[1], kl = ws[2];
    if (ws[3] != Cin)
        throw ShapeError("conv3d: weight Cin " + std::to_string(ws[3]) + " vs input C " +
                         std::to_string(Cin));
    const int64_t Cout = ws[4];
    const auto& st     = spec.stride;
    const auto& pd     = spec.pad;
    const int64_t Ho   = (H + 2 * pd[0] - kh) / st[0] + 1;
    const int64_t Wo   = (W + 2 * pd[1] - kw) / st[1] + 1;
    const int64_t Lo   = (L + 2 * pd[2] - kl) / st[2] + 1;
    if (Ho < 1 || Wo < 1 || Lo < 1)
        throw ShapeError("conv3d: output would be empty for input " + shape_str(xs));

    Tensor out({Ho, Wo, Lo, Cout});
    const double* xp = x.data();
    const double* wp = w.data();
    const double* bp = b.data();
    double* op       = out.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo)
            for (int64_t lo = 0; lo < Lo; ++lo) {
                double* acc = op + ((ho * Wo + wo) * Lo + lo) * Cout;
                for (int64_t co = 0; co < Cout; ++co)
                    acc[co] = bp[co];
                for (int64_t dh = 0; dh < kh; ++dh) {
                    const int64_t hi = ho * st[0] - pd[0] + dh;
                    if (hi < 0 || hi >= H)
                        continue;
                    for (int64_t dw = 0; dw < kw; ++dw) {
                        const int64_t wi = wo * st[1] - pd[1] + dw;
                        if (wi < 0 || wi >= W)
                            continue;
                        for (int64_t dl = 0; dl < kl; ++dl) {
                            const int64_t li = lo * st[2] - pd[2] + dl;
                            if (li < 0 || li >= L)
                                continue;
                            const double* xv = xp + ((hi * W + wi) * L + li) * Cin;
                            const double* wv = wp + (((dh * kw + dw) * kl + dl) * Cin) * Cout;
                            for (int64_t ci = 0; ci < Cin; ++ci) {
                                const double xvi  = xv[ci];
                                const double* wvc = wv + ci * Cout;
                                for (int64_t co = 0; co < Cout; ++co)
                                    acc[co] += xvi * wvc[co];
                            }
                        }
                    }
                }
            }
    return out;
}

void conv3d_backward(const Tensor& x, const Tensor& w, const Conv3dSpec& spec, const Tensor& gout,
                     Tensor* gx, Tensor* gw, Tensor* gb) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    const auto& gs = gout.shape();
    const int64_t H = xs[0], W = xs[1], L = xs[2], Cin = xs[3];
    const int64_t kh = ws[0], kw = ws[1], kl = ws[2], Cout = ws[4];
    const int64_t Ho = gs[0], Wo = gs[1], Lo = gs[2];
    const auto& st = spec.stride;
    const auto& pd = spec.pad;
    const double* gp = gout.data();

    if (gb) {
        double* gbp = gb->data();
        for (int64_t o = 0; o < Ho * Wo * Lo; ++o)
            for (int64_t co = 0; co < Cout; ++co)
                gbp[co] += gp[o * Cout + co];
    }

    if (gw) {
        // One (dh,dw,dl) kernel offset per outer iteration; each owns a
        // disjoint slab of gw, so the parallel loop stays deterministic.
        double* gwp      = gw->data();
        const double* xp = x.data();
#pragma omp parallel for collapse(3) schedule(static)
        for (int64_t dh = 0; dh < kh; ++dh)
            for (int64_t dw = 0; dw < kw; ++dw)
                for (int64_t dl = 0; dl < kl; ++dl) {
                    double* gslab = gwp + (((dh * kw + dw) * kl + dl) * Cin) * Cout;
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        const int64_t hi = ho * st[0] - pd[0] + dh;
                        if (hi < 0 || hi >= H)
                            continue;
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            const int64_t wi = wo * st[1] - pd[1] + dw;
                            if (wi < 0 || wi >= W)
                                continue;
                            for (int64_t lo = 0; lo < Lo; ++lo) {
                                const int64_t li = lo * st[2] - pd[2] + dl;
                                if (li < 0 || li >= L)
                                    continue;
                                const double* xv = xp + ((hi * W + wi) * L + li) * Cin;
                                const double* gv = gp + ((ho * Wo + wo) * Lo + lo) * Cout;
                                for (int64_t ci = 0; ci < Cin; ++ci) {
                                    const double xvi = xv[ci];
                                    double* grow     = gslab + ci * Cout;
                                    for (int64_t co = 0; co < Cout; ++co)
                                        grow[co] += xvi * gv[co];
                                }
                            }
                        }
                    }
                }
    }

    if (gx) {
        // Weight transposed to (kh,kw,kl,Cout,Cin) so the ci loop is unit stride.
        Tensor wt({kh, kw, kl, Cout, Cin});
        {
            const double* wp = w.data();
            double* tp       = wt.data();
            for (int64_t k = 0; k < kh * kw * kl; ++k)
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t co = 0; co < Cout; ++co)
                        tp[(k * Cout + co) * Cin + ci] = wp[(k * Cin + ci) * Cout + co];
        }
        double* gxp      = gx->data();
        const double* tp = wt.data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t hi = 0; hi < H; ++hi)
            for (int64_t wi = 0; wi < W; ++wi)
                for (int64_t li = 0; li < L; ++li) {
                    double* acc = gxp + ((hi * W + wi) * L + li) * Cin;
                    for (int64_t dh = 0; dh < kh; ++dh) {
                        const int64_t hnum = hi + pd[0] - dh;
                        if (hnum < 0 || hnum % st[0] != 0)
                            continue;
                        const int64_t ho = hnum / st[0];
                        if (ho >= Ho)
                            continue;
                        for (int64_t dw = 0; dw < kw; ++dw) {
                            const int64_t wnum = wi + pd[1] - dw;
                            if (wnum < 0 || wnum % st[1] != 0)
                                continue;
                            const int64_t wo = wnum / st[1];
                            if (wo >= Wo)
                                continue;
                            for (int64_t dl = 0; dl < kl; ++dl) {
                                const int64_t lnum = li + pd[2] - dl;
                                if (lnum < 0 || lnum % st[2] != 0)
                                    continue;
                                const int64_t lo = lnum / st[2];
                                if (lo >= Lo)
                                    continue;
                                const double* gv = gp + ((ho * Wo + wo) * Lo + lo) * Cout;
                                const double* wv = tp + (((dh * kw + dw) * kl + dl) * Cout) * Cin;
                                for (int64_t co = 0; co < Cout; ++co) {
                                    const double gvo  = gv[co];
                                    const double* wvc = wv + co * Cin;
                                    for (int64_t ci = 0; ci < Cin; ++ci)
                                        acc[ci] += gvo * wvc[ci];
                                }
                            }
                        }
                    }
                }
    }
}

Tensor silu_forward(const Tensor& x) {
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double v = x[i];
        out[i]         = v / (1.0 + std::exp(-v));
    }
    return out;
}

Tensor group_norm_forward(const Tensor& x, int64_t num_groups, double eps) {
    const auto& xs  = x.shape();
    const int64_t C = xs[3];
    if (C % num_groups != 0)
        throw ConfigError("group_norm: C=" + std::to_string(C) + " not divisible by groups=" +
                          std::to_string(num_groups));
    const int64_t Cg    = C / num_groups;
    const int64_t sites = x.numel() / C;
    Tensor out(xs);
    for (int64_t g = 0; g < num_groups; ++g) {
        double m = 0.0;
        for (int64_t s = 0; s < sites; ++s)
            for (int64_t c = 0; c < Cg; ++c)
                m += x[s * C + g * Cg + c];
        const double n = static_cast<double>(sites * Cg);
        m /= n;
        double v = 0.0;
        for (int64_t s = 0; s < sites; ++s)
            for (int64_t c = 0; c < Cg; ++c) {
                const double d = x[s * C + g * Cg + c] - m;
                v += d * d;
            }
        v /= n;
        const double inv = 1.0 / std::sqrt(v + eps);
        for (int64_t s = 0; s < sites; ++s)
            for (int64_t c = 0; c < Cg; ++c)
                out[s * C + g * Cg + c] = (x[s * C + g * Cg + c] - m) * inv;
    }
    return out;
}

Tensor upsample_nearest_forward(const Tensor& x, std::array<int64_t, 3> factor) {
    const auto& xs = x.shape();
    const int64_t H = xs[0], W = xs[1], L = xs[2], C = xs[3];
    Tensor out({H * factor[0], W * factor[1], L * factor[2], C});
    for (int64_t h = 0; h < H * factor[0]; ++h)
        for (int64_t w = 0; w < W * factor[1]; ++w)
            for (int64_t l = 0; l < L * factor[2]; ++l) {
                const double* src = x.data() +
                    (((h / factor[0]) * W + w / factor[1]) * L + l / factor[2]) * C;
                double* dst = out.data() + ((h * W * factor[1] + w) * L * factor[2] + l) * C;
                for (int64_t c = 0; c < C; ++c)
                    dst[c] = src[c];
            }
    return out;
}

}  // namespace kernels

Var conv3d(const Var& x, const Var& w, const Var& b, const Conv3dSpec& spec) {
    Tensor out = kernels::conv3d_forward(x->value, w->value, b->value, spec);
    return finish_node(std::move(out), {x, w, b}, [x, w, b, spec](Node& self) {
        Tensor* gx = x->requires_grad ? &x->ensure_grad() : nullptr;
        Tensor* gw = w->requires_grad ? &w->ensure_grad() : nullptr;
        Tensor* gb = b->requires_grad ? &b->ensure_grad() : nullptr;
        kernels::conv3d_backward(x->value, w->value, spec, self.grad, gx, gw, gb);
    });
}

Var group_norm(const Var& x, int64_t num_groups, double eps) {
    Tensor out = kernels::group_norm_forward(x->value, num_groups, eps);
    Var result = finish_node(out, {x}, nullptr);
    if (!result->requires_grad)
        return result;
    Tensor y = out;  // normalized values, shared storage
    result->backward_fn = [x, y, num_groups, eps](Node& self) {
        if (!x->requires_grad)
            return;
        const auto& xs   = x->value.shape();
        const int64_t C  = xs[3];
        const int64_t Cg = C / num_groups;
        const int64_t sites = x->value.numel() / C;
        const double n      = static_cast<double>(sites * Cg);
        Tensor& gx          = x->ensure_grad();
        for (int64_t g = 0; g < num_groups; ++g) {
            // dx = inv_std * (g - mean(g) - y*mean(g*y)), biased variance.
            double m = 0.0, v = 0.0;
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < Cg; ++c)
                    m += x->value[s * C + g * Cg + c];
            m /= n;
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < Cg; ++c) {
                    const double d = x->value[s * C + g * Cg + c] - m;
                    v += d * d;
                }
            v /= n;
            const double inv_std = 1.0 / std::sqrt(v + eps);
            double gmean = 0.0, gymean = 0.0;
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < Cg; ++c) {
                    const int64_t i = s * C + g * Cg + c;
                    gmean += self.grad[i];
                    gymean += self.grad[i] * y[i];
                }
            gmean /= n;
            gymean /= n;
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < Cg; ++c) {
                    const int64_t i = s * C + g * Cg + c;
                    gx[i] += inv_std * (self.grad[i] - gmean - y[i] * gymean);
                }
        }
    };
    return result;
}

Var upsample_nearest(const Var& x, std::array<int64_t, 3> factor) {
    Tensor out = kernels::upsample_nearest_forward(x->value, factor);
    return finish_node(std::move(out), {x}, [x, factor](Node& self) {
        if (!x->requires_grad)
            return;
        const auto& xs = x->value.shape();
        const int64_t H = xs[0], W = xs[1], L = xs[2], C = xs[3];
        Tensor& gx          = x->ensure_grad();
        const auto& os      = self.grad.shape();
        const int64_t Wo = os[1], Lo = os[2];
        for (int64_t h = 0; h < H * factor[0]; ++h)
            for (int64_t w = 0; w < W * factor[1]; ++w)
                for (int64_t l = 0; l < L * factor[2]; ++l) {
                    double* dst = gx.data() +
                        (((h / factor[0]) * W + w / factor[1]) * L + l / factor[2]) * C;
                    const double* src = self.grad.data() + ((h * Wo + w) * Lo + l) * C;
                    for (int64_t c = 0; c < C; ++c)
                        dst[c] += src[c];
                }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const auto& as = a->value.shape();
    const auto& bs = b->value.shape();
    if (as[0] != bs[0] || as[1] != bs[1] || as[2] != bs[2])
        throw ShapeError("concat_channels: spatial mismatch " + shape_str(as) + " vs " +
                         shape_str(bs));
    const int64_t Ca = as[3], Cb = bs[3];
    const int64_t sites = a->value.numel() / Ca;
    Tensor out({as[0], as[1], as[2], Ca + Cb});
    for (int64_t s = 0; s < sites; ++s) {
        for (int64_t c = 0; c < Ca; ++c)
            out[s * (Ca + Cb) + c] = a->value[s * Ca + c];
        for (int64_t c = 0; c < Cb; ++c)
            out[s * (Ca + Cb) + Ca + c] = b->value[s * Cb + c];
    }
    return finish_node(std::move(out), {a, b}, [a, b, sites, Ca, Cb](Node& self) {
        if (a->requires_grad) {
            Tensor& ga = a->ensure_grad();
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < Ca; ++c)
                    ga[s * Ca + c] += self.grad[s * (Ca + Cb) + c];
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int64_t s = 0; s < sites; ++s)
                for (int64_t c = 0; c < Cb; ++c)
                    gb[s * Cb + c] += self.grad[s * (Ca + Cb) + Ca + c];
        }
    });
}

Var extract_slice(const Var& x, int64_t l) {
    const auto& xs = x->value.shape();
    const int64_t H = xs[0], W = xs[1], L = xs[2], C = xs[3];
    if (l < 0 || l >= L)
        throw ShapeError("extract_slice: index out of range");
    Tensor out({H, W, 1, C});
    for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
            for (int64_t c = 0; c < C; ++c)
                out[(h * W + w) * C + c] = x->value[((h * W + w) * L + l) * C + c];
    return finish_node(std::move(out), {x}, [x, l, H, W, L, C](Node& self) {
        if (!x->requires_grad)
            return;
        Tensor& gx = x->ensure_grad();
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w)
                for (int64_t c = 0; c < C; ++c)
                    gx[((h * W + w) * L + l) * C + c] += self.grad[(h * W + w) * C + c];
    });
}

// ---------------- attention ----------------

namespace {

// Token indexing for the two attention layouts. group/token -> flat site.
struct TokenLayout {
    int64_t groups;
    int64_t tokens;
    int64_t H, W, L, C;
    AttentionMode mode;

    int64_t flat(int64_t g, int64_t t) const {
        if (mode == AttentionMode::Spatial) {
            // group = depth slice l, token = (h, w)
            const int64_t h = t / W, w = t % W;
            return ((h * W + w) * L + g) * C;
        }
        // group = (h, w) site, token = depth position l
        const int64_t h = g / W, w = g % W;
        return ((h * W + w) * L + t) * C;
    }
};

TokenLayout make_layout(const std::vector<int64_t>& xs, AttentionMode mode) {
    TokenLayout lay;
    lay.H = xs[0];
    lay.W = xs[1];
    lay.L = xs[2];
    lay.C = xs[3];
    lay.mode = mode;
    if (mode == AttentionMode::Spatial) {
        lay.groups = lay.L;
        lay.tokens = lay.H * lay.W;
    } else {
        lay.groups = lay.H * lay.W;
        lay.tokens = lay.L;
    }
    return lay;
}

}  // namespace

Var attention_core(const Var& q, const Var& k, const Var& v, AttentionMode mode,
                   std::vector<Tensor>* weights_out) {
    check_same_shape(q->value, k->value, "attention_core q/k");
    check_same_shape(q->value, v->value, "attention_core q/v");
    const auto lay     = make_layout(q->value.shape(), mode);
    const int64_t T    = lay.tokens;
    const int64_t C    = lay.C;
    const double iscale = 1.0 / std::sqrt(static_cast<double>(C));

    const bool need_grad = any_requires_grad({&q, &k, &v});
    Tensor out(q->value.shape());
    auto attn = std::make_shared<std::vector<Tensor>>();  // per-group weights, kept for backward
    attn->reserve(static_cast<size_t>(lay.groups));

    std::vector<double> scores(static_cast<size_t>(T));
    for (int64_t g = 0; g < lay.groups; ++g) {
        Tensor A({T, T});
        for (int64_t i = 0; i < T; ++i) {
            const double* qi = q->value.data() + lay.flat(g, i);
            double mx        = -1e300;
            for (int64_t j = 0; j < T; ++j) {
                const double* kj = k->value.data() + lay.flat(g, j);
                double s         = 0.0;
                for (int64_t c = 0; c < C; ++c)
                    s += qi[c] * kj[c];
                s *= iscale;
                scores[static_cast<size_t>(j)] = s;
                mx                             = std::max(mx, s);
            }
            double z = 0.0;
            for (int64_t j = 0; j < T; ++j) {
                const double e                 = std::exp(scores[static_cast<size_t>(j)] - mx);
                scores[static_cast<size_t>(j)] = e;
                z += e;
            }
            double* arow = A.data() + i * T;
            for (int64_t j = 0; j < T; ++j)
                arow[j] = scores[static_cast<size_t>(j)] / z;
            double* oi = out.data() + lay.flat(g, i);
            for (int64_t c = 0; c < C; ++c)
                oi[c] = 0.0;
            for (int64_t j = 0; j < T; ++j) {
                const double a   = arow[j];
                const double* vj = v->value.data() + lay.flat(g, j);
                for (int64_t c = 0; c < C; ++c)
                    oi[c] += a * vj[c];
            }
        }
        if (need_grad || weights_out)
            attn->push_back(std::move(A));
    }
    if (weights_out)
        *weights_out = *attn;

    return finish_node(std::move(out), {q, k, v}, [q, k, v, lay, attn, iscale](Node& self) {
        const int64_t T = lay.tokens, C = lay.C;
        Tensor* gq = q->requires_grad ? &q->ensure_grad() : nullptr;
        Tensor* gk = k->requires_grad ? &k->ensure_grad() : nullptr;
        Tensor* gv = v->requires_grad ? &v->ensure_grad() : nullptr;
        std::vector<double> dA(static_cast<size_t>(T));
        for (int64_t g = 0; g < lay.groups; ++g) {
            const Tensor& A = (*attn)[static_cast<size_t>(g)];
            for (int64_t i = 0; i < T; ++i) {
                const double* go   = self.grad.data() + lay.flat(g, i);
                const double* arow = A.data() + i * T;
                // dV += A^T dO
                if (gv)
                    for (int64_t j = 0; j < T; ++j) {
                        double* gvj = gv->data() + lay.flat(g, j);
                        const double a = arow[j];
                        for (int64_t c = 0; c < C; ++c)
                            gvj[c] += a * go[c];
                    }
                if (!gq && !gk)
                    continue;
                // dA_ij = dO_i . V_j ; dS = A*(dA - sum_j dA A)
                double dot_accum = 0.0;
                for (int64_t j = 0; j < T; ++j) {
                    const double* vj = v->value.data() + lay.flat(g, j);
                    double d         = 0.0;
                    for (int64_t c = 0; c < C; ++c)
                        d += go[c] * vj[c];
                    dA[static_cast<size_t>(j)] = d;
                    dot_accum += d * arow[j];
                }
                for (int64_t j = 0; j < T; ++j) {
                    const double ds = arow[j] * (dA[static_cast<size_t>(j)] - dot_accum) * iscale;
                    if (gq) {
                        double* gqi      = gq->data() + lay.flat(g, i);
                        const double* kj = k->value.data() + lay.flat(g, j);
                        for (int64_t c = 0; c < C; ++c)
                            gqi[c] += ds * kj[c];
                    }
                    if (gk) {
                        double* gkj      = gk->data() + lay.flat(g, j);
                        const double* qi = q->value.data() + lay.flat(g, i);
                        for (int64_t c = 0; c < C; ++c)
                            gkj[c] += ds * qi[c];
                    }
                }
            }
        }
    });
}

Var straight_through(const Var& z_hat, Tensor z_q_values) {
    check_same_shape(z_hat->value, z_q_values, "straight_through");
    return finish_node(std::move(z_q_values), {z_hat}, [z_hat](Node& self) {
        if (z_hat->requires_grad)
            axpy(z_hat->ensure_grad(), 1.0, self.grad);
    });
}

Var gather_rows(const Var& codebook, const std::vector<int32_t>& indices,
                const std::vector<int64_t>& latent_shape) {
    const int64_t nz = codebook->value.shape()[1];
    Tensor out(latent_shape);
    const int64_t sites = out.numel() / nz;
    if (static_cast<int64_t>(indices.size()) != sites)
        throw ShapeError("gather_rows: index count does not match latent sites");
    for (int64_t s = 0; s < sites; ++s) {
        const double* row = codebook->value.data() + static_cast<int64_t>(indices[s]) * nz;
        for (int64_t c = 0; c < nz; ++c)
            out[s * nz + c] = row[c];
    }
    return finish_node(std::move(out), {codebook},
                       [codebook, indices, nz, sites](Node& self) {
                           if (!codebook->requires_grad)
                               return;
                           Tensor& g = codebook->ensure_grad();
                           for (int64_t s = 0; s < sites; ++s) {
                               double* row = g.data() + static_cast<int64_t>(indices[s]) * nz;
                               for (int64_t c = 0; c < nz; ++c)
                                   row[c] += self.grad[s * nz + c];
                           }
                       });
}

}  // namespace medlsdm
