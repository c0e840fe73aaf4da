#include "preflab/tape.hpp"

#include <algorithm>
#include <cmath>

#include "preflab/errors.hpp"

namespace preflab {

namespace {

double softplus(double x) {
    // stable for large |x|
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

int Tape::check(Value v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw ContractError("value does not belong to this tape");
    return v.id;
}

Value Tape::push(Tensor value, bool requires_grad, std::function<void()> bw) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on tape");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = requires_grad ? std::move(bw) : nullptr;
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
}

Value Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad);
}

Value Tape::constant(Tensor value) { return push(std::move(value), false); }

Value Tape::matmul(Value av, Value bv) {
    int ai = check(av), bi = check(bv);
    const Tensor& a = nodes_[ai].value;
    const Tensor& b = nodes_[bi].value;
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
    std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n}, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data[i * k];
        double* orow = &out.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            double aval = arow[p];
            const double* brow = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }
    bool rg = nodes_[ai].requires_grad || nodes_[bi].requires_grad;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, [this, ai, bi, self, m, k, n] {
        const Tensor& g = nodes_[self].grad;
        const Tensor& a = nodes_[ai].value;
        const Tensor& b = nodes_[bi].value;
        if (nodes_[ai].requires_grad) {
            Tensor& ga = grad_buf(ai);  // g . b^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double gv = g.data[i * n + j];
                    if (gv == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p)
                        ga.data[i * k + p] += gv * b.data[p * n + j];
                }
        }
        if (nodes_[bi].requires_grad) {
            Tensor& gb = grad_buf(bi);  // a^T . g
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double aval = a.data[i * k + p];
                    if (aval == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j)
                        gb.data[p * n + j] += aval * g.data[i * n + j];
                }
        }
    });
}

Value Tape::add(Value av, Value bv) {
    int ai = check(av), bi = check(bv);
    const Tensor& a = nodes_[ai].value;
    const Tensor& b = nodes_[bi].value;
    if (!a.same_shape(b))
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    bool rg = nodes_[ai].requires_grad || nodes_[bi].requires_grad;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, [this, ai, bi, self] {
        const Tensor& g = nodes_[self].grad;
        if (nodes_[ai].requires_grad) {
            Tensor& ga = grad_buf(ai);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (nodes_[bi].requires_grad) {
            Tensor& gb = grad_buf(bi);
            for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
        }
    });
}

Value Tape::sub(Value av, Value bv) {
    int ai = check(av), bi = check(bv);
    const Tensor& a = nodes_[ai].value;
    const Tensor& b = nodes_[bi].value;
    if (!a.same_shape(b))
        throw ShapeError("sub shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    bool rg = nodes_[ai].requires_grad || nodes_[bi].requires_grad;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, [this, ai, bi, self] {
        const Tensor& g = nodes_[self].grad;
        if (nodes_[ai].requires_grad) {
            Tensor& ga = grad_buf(ai);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (nodes_[bi].requires_grad) {
            Tensor& gb = grad_buf(bi);
            for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
        }
    });
}

Value Tape::mul(Value av, Value bv) {
    int ai = check(av), bi = check(bv);
    const Tensor& a = nodes_[ai].value;
    const Tensor& b = nodes_[bi].value;
    if (!a.same_shape(b))
        throw ShapeError("mul shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    bool rg = nodes_[ai].requires_grad || nodes_[bi].requires_grad;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, [this, ai, bi, self] {
        const Tensor& g = nodes_[self].grad;
        const Tensor& a = nodes_[ai].value;
        const Tensor& b = nodes_[bi].value;
        if (nodes_[ai].requires_grad) {
            Tensor& ga = grad_buf(ai);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * b.data[i];
        }
        if (nodes_[bi].requires_grad) {
            Tensor& gb = grad_buf(bi);
            for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * a.data[i];
        }
    });
}

Value Tape::add_row(Value av, Value bv) {
    int ai = check(av), bi = check(bv);
    const Tensor& a = nodes_[ai].value;
    const Tensor& b = nodes_[bi].value;
    if (b.rows() != 1 || b.cols() != a.cols())
        throw ShapeError("add_row bias " + b.shape_str() + " vs " + a.shape_str());
    Tensor out = a;
    std::size_t c = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += b.data[j];
    bool rg = nodes_[ai].requires_grad || nodes_[bi].requires_grad;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, [this, ai, bi, self, c] {
        const Tensor& g = nodes_[self].grad;
        if (nodes_[ai].requires_grad) {
            Tensor& ga = grad_buf(ai);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (nodes_[bi].requires_grad) {
            Tensor& gb = grad_buf(bi);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < c; ++j) gb.data[j] += g.data[i * c + j];
        }
    });
}

Value Tape::scale(Value av, double cst) {
    int ai = check(av);
    Tensor out = nodes_[ai].value;
    for (double& v : out.data) v *= cst;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self, cst] {
        const Tensor& g = nodes_[self].grad;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += cst * g.data[i];
    });
}

Value Tape::add_const(Value av, double cst) {
    int ai = check(av);
    Tensor out = nodes_[ai].value;
    for (double& v : out.data) v += cst;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self] {
        const Tensor& g = nodes_[self].grad;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    });
}

Value Tape::relu(Value av) {
    int ai = check(av);
    Tensor out = nodes_[ai].value;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self] {
        const Tensor& g = nodes_[self].grad;
        const Tensor& x = nodes_[ai].value;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < g.data.size(); ++i)
            if (x.data[i] > 0.0) ga.data[i] += g.data[i];
    });
}

Value Tape::transpose(Value av) {
    int ai = check(av);
    const Tensor& a = nodes_[ai].value;
    std::size_t r = a.rows(), c = a.cols();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = a.data[i * c + j];
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self, r, c] {
        const Tensor& g = nodes_[self].grad;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga.data[i * c + j] += g.data[j * r + i];
    });
}

Value Tape::slice_cols(Value av, std::size_t start, std::size_t width) {
    int ai = check(av);
    const Tensor& a = nodes_[ai].value;
    std::size_t r = a.rows(), c = a.cols();
    if (start + width > c) throw ShapeError("slice_cols out of range on " + a.shape_str());
    Tensor out({r, width});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < width; ++j) out.data[i * width + j] = a.data[i * c + start + j];
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self, start, width, r, c] {
        const Tensor& g = nodes_[self].grad;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < width; ++j)
                ga.data[i * c + start + j] += g.data[i * width + j];
    });
}

Value Tape::concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of zero parts");
    std::vector<int> ids;
    std::size_t r = 0, total = 0;
    bool rg = false;
    for (Value p : parts) {
        int i = check(p);
        ids.push_back(i);
        const Tensor& t = nodes_[i].value;
        if (r == 0) r = t.rows();
        if (t.rows() != r) throw ShapeError("concat_cols row mismatch");
        total += t.cols();
        rg = rg || nodes_[i].requires_grad;
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (int id : ids) {
        const Tensor& t = nodes_[id].value;
        std::size_t c = t.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data[i * total + off + j] = t.data[i * c + j];
        off += c;
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, [this, ids, self, r, total] {
        const Tensor& g = nodes_[self].grad;
        std::size_t off = 0;
        for (int id : ids) {
            std::size_t c = nodes_[id].value.cols();
            if (nodes_[id].requires_grad) {
                Tensor& ga = grad_buf(id);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        ga.data[i * c + j] += g.data[i * total + off + j];
            }
            off += c;
        }
    });
}

Value Tape::gather_rows(Value tablev, const std::vector<int>& ids) {
    int ti = check(tablev);
    const Tensor& table = nodes_[ti].value;
    std::size_t n = table.rows(), c = table.cols();
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= n)
            throw IndexError("gather_rows id " + std::to_string(id) + " out of range " +
                             std::to_string(n));
    Tensor out({ids.size(), c});
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < c; ++j)
            out.data[i * c + j] = table.data[static_cast<std::size_t>(ids[i]) * c + j];
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ti].requires_grad, [this, ti, ids, self, c] {
        const Tensor& g = nodes_[self].grad;
        Tensor& gt = grad_buf(ti);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < c; ++j)
                gt.data[static_cast<std::size_t>(ids[i]) * c + j] += g.data[i * c + j];
    });
}

Value Tape::layer_norm(Value xv, Value gv, Value bv, double eps) {
    int xi = check(xv), gi = check(gv), bi = check(bv);
    const Tensor& x = nodes_[xi].value;
    const Tensor& gamma = nodes_[gi].value;
    const Tensor& beta = nodes_[bi].value;
    std::size_t r = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("layer_norm affine params must have width " + std::to_string(c));
    Tensor out({r, c});
    std::vector<double> inv_std(r), xhat(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += x.data[i * c + j];
        m /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double d = x.data[i * c + j] - m;
            var += d * d;
        }
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            double h = (x.data[i * c + j] - m) * inv_std[i];
            xhat[i * c + j] = h;
            out.data[i * c + j] = gamma.data[j] * h + beta.data[j];
        }
    }
    bool rg = nodes_[xi].requires_grad || nodes_[gi].requires_grad || nodes_[bi].requires_grad;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg,
                [this, xi, gi, bi, self, r, c, inv_std = std::move(inv_std),
                 xhat = std::move(xhat)] {
                    const Tensor& g = nodes_[self].grad;
                    const Tensor& gamma = nodes_[gi].value;
                    if (nodes_[gi].requires_grad) {
                        Tensor& gg = grad_buf(gi);
                        for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                                gg.data[j] += g.data[i * c + j] * xhat[i * c + j];
                    }
                    if (nodes_[bi].requires_grad) {
                        Tensor& gb = grad_buf(bi);
                        for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gb.data[j] += g.data[i * c + j];
                    }
                    if (nodes_[xi].requires_grad) {
                        Tensor& gx = grad_buf(xi);
                        double n = static_cast<double>(c);
                        for (std::size_t i = 0; i < r; ++i) {
                            double sum_dh = 0.0, sum_dh_h = 0.0;
                            for (std::size_t j = 0; j < c; ++j) {
                                double dh = g.data[i * c + j] * gamma.data[j];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[i * c + j];
                            }
                            for (std::size_t j = 0; j < c; ++j) {
                                double dh = g.data[i * c + j] * gamma.data[j];
                                gx.data[i * c + j] += inv_std[i] / n *
                                                      (n * dh - sum_dh - xhat[i * c + j] * sum_dh_h);
                            }
                        }
                    }
                });
}

Value Tape::softmax_rows(Value av) {
    int ai = check(av);
    const Tensor& a = nodes_[ai].value;
    std::size_t r = a.rows(), c = a.cols();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        double mx = a.data[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, a.data[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double e = std::exp(a.data[i * c + j] - mx);
            out.data[i * c + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] /= z;
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self, r, c] {
        const Tensor& g = nodes_[self].grad;
        const Tensor& p = nodes_[self].value;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < r; ++i) {
            double dotv = 0.0;
            for (std::size_t j = 0; j < c; ++j) dotv += g.data[i * c + j] * p.data[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                ga.data[i * c + j] += p.data[i * c + j] * (g.data[i * c + j] - dotv);
        }
    });
}

Value Tape::causal_softmax(Value av) {
    int ai = check(av);
    const Tensor& a = nodes_[ai].value;
    std::size_t t = a.rows();
    if (a.cols() != t) throw ShapeError("causal_softmax expects square scores, got " + a.shape_str());
    Tensor out({t, t}, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        double mx = a.data[i * t];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, a.data[i * t + j]);
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            double e = std::exp(a.data[i * t + j] - mx);
            out.data[i * t + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j <= i; ++j) out.data[i * t + j] /= z;
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self, t] {
        const Tensor& g = nodes_[self].grad;
        const Tensor& p = nodes_[self].value;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < t; ++i) {
            double dotv = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dotv += g.data[i * t + j] * p.data[i * t + j];
            for (std::size_t j = 0; j <= i; ++j)
                ga.data[i * t + j] += p.data[i * t + j] * (g.data[i * t + j] - dotv);
        }
    });
}

Value Tape::log_sigmoid(Value av) {
    int ai = check(av);
    Tensor out = nodes_[ai].value;
    for (double& v : out.data) v = -softplus(-v);
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), nodes_[ai].requires_grad, [this, ai, self] {
        const Tensor& g = nodes_[self].grad;
        const Tensor& x = nodes_[ai].value;
        Tensor& ga = grad_buf(ai);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            // d/dx log sigma(x) = sigma(-x)
            double s = 1.0 / (1.0 + std::exp(x.data[i]));
            ga.data[i] += g.data[i] * s;
        }
    });
}

Value Tape::sum(Value av) {
    int ai = check(av);
    double s = 0.0;
    for (double v : nodes_[ai].value.data) s += v;
    int self = static_cast<int>(nodes_.size());
    return push(Tensor::scalar(s), nodes_[ai].requires_grad, [this, ai, self] {
        double g = nodes_[self].grad.data[0];
        Tensor& ga = grad_buf(ai);
        for (double& v : ga.data) v += g;
    });
}

Value Tape::weighted_target_logprob(Value logitsv, const std::vector<int>& targets,
                                    const std::vector<double>& weights) {
    int li = check(logitsv);
    const Tensor& logits = nodes_[li].value;
    std::size_t t = logits.rows(), vsz = logits.cols();
    if (targets.size() != t || weights.size() != t)
        throw ShapeError("targets/weights length must equal logit rows");
    for (std::size_t i = 0; i < t; ++i)
        if (weights[i] != 0.0 && (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vsz))
            throw IndexError("target id " + std::to_string(targets[i]) + " out of vocab " +
                             std::to_string(vsz));
    double total = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (weights[i] == 0.0) continue;
        double mx = logits.data[i * vsz];
        for (std::size_t j = 1; j < vsz; ++j) mx = std::max(mx, logits.data[i * vsz + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < vsz; ++j) z += std::exp(logits.data[i * vsz + j] - mx);
        double lse = mx + std::log(z);
        total += weights[i] * (logits.data[i * vsz + static_cast<std::size_t>(targets[i])] - lse);
    }
    int self = static_cast<int>(nodes_.size());
    return push(Tensor::scalar(total), nodes_[li].requires_grad,
                [this, li, self, targets, weights, t, vsz] {
                    double g = nodes_[self].grad.data[0];
                    const Tensor& logits = nodes_[li].value;
                    Tensor& gl = grad_buf(li);
                    for (std::size_t i = 0; i < t; ++i) {
                        if (weights[i] == 0.0) continue;
                        double mx = logits.data[i * vsz];
                        for (std::size_t j = 1; j < vsz; ++j)
                            mx = std::max(mx, logits.data[i * vsz + j]);
                        double z = 0.0;
                        for (std::size_t j = 0; j < vsz; ++j)
                            z += std::exp(logits.data[i * vsz + j] - mx);
                        double gw = g * weights[i];
                        for (std::size_t j = 0; j < vsz; ++j) {
                            double p = std::exp(logits.data[i * vsz + j] - mx) / z;
                            gl.data[i * vsz + j] -= gw * p;
                        }
                        gl.data[i * vsz + static_cast<std::size_t>(targets[i])] += gw;
                    }
                });
}

Value Tape::cross_entropy(Value logits, const std::vector<int>& targets,
                          const std::vector<double>& mask) {
    std::size_t t = value(logits).rows();
    std::vector<double> w = mask.empty() ? std::vector<double>(t, 1.0) : mask;
    if (w.size() != t) throw ShapeError("cross_entropy mask length mismatch");
    double n = 0.0;
    for (double v : w) n += (v != 0.0) ? 1.0 : 0.0;
    if (n == 0.0) throw ContractError("cross_entropy with empty target mask");
    Value lp = weighted_target_logprob(logits, targets, w);
    return scale(lp, -1.0 / n);
}

void Tape::backward(Value loss) {
    int li = check(loss);
    if (nodes_[li].value.size() != 1) throw ContractError("backward expects a scalar loss");
    if (!nodes_[li].requires_grad)
        throw ContractError("backward on a value detached from all parameters");
    if (ran_backward_) throw ContractError("tape already swept; build a fresh tape per step");
    ran_backward_ = true;
    grad_buf(li).data[0] = 1.0;
    for (int i = li; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.data.empty()) n.backward();
    }
}

}  // namespace preflab
