#include "otdistill/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "otdistill/errors.hpp"

namespace otdistill::ag {

double Node::scalar() const {
    if (value.rows() != 1 || value.cols() != 1) {
        throw ContractError("scalar() on non-scalar node of shape " + value.shape_str());
    }
    return value[0];
}

NodePtr leaf(Matrix value, std::string name) {
    auto n = std::make_shared<Node>();
    n->grad = Matrix(value.rows(), value.cols());
    n->value = std::move(value);
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

NodePtr constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->grad = Matrix(value.rows(), value.cols());
    n->value = std::move(value);
    n->requires_grad = false;
    return n;
}

NodePtr detach(const NodePtr& a) { return constant(a->value); }

namespace {

NodePtr make(Matrix v, const char* op, std::vector<NodePtr> parents,
             std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->grad = Matrix(v.rows(), v.cols());
    n->value = std::move(v);
    n->op = op;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backprop = std::move(bp);
    }
    return n;
}

enum class Bcast { Same, Scalar, Col, Row };

Bcast bcast_kind(const Matrix& a, const Matrix& b, const char* op) {
    if (a.same_shape(b)) return Bcast::Same;
    if (b.rows() == 1 && b.cols() == 1) return Bcast::Scalar;
    if (b.rows() == a.rows() && b.cols() == 1) return Bcast::Col;
    if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
    throw DimensionError(std::string(op) + ": cannot broadcast " + b.shape_str() + " against " +
                         a.shape_str());
}

inline std::size_t bindex(Bcast k, std::size_t r, std::size_t c, std::size_t bcols) {
    switch (k) {
        case Bcast::Same: return r * bcols + c;
        case Bcast::Scalar: return 0;
        case Bcast::Col: return r;
        case Bcast::Row: return c;
    }
    return 0;
}

template <class F>
NodePtr binary_ew(const NodePtr& a, const NodePtr& b, const char* op, F&& f,
                  std::function<void(Node&)> bp) {
    const Matrix& av = a->value;
    const Matrix& bv = b->value;
    const Bcast k = bcast_kind(av, bv, op);
    Matrix out(av.rows(), av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t c = 0; c < av.cols(); ++c) {
            out.at(r, c) = f(av.at(r, c), bv[bindex(k, r, c, bv.cols())]);
        }
    }
    out.validate(op);
    return make(std::move(out), op, {a, b}, std::move(bp));
}

void acc_into(Node& p, const Matrix& g) {
    if (!p.requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
}

}  // namespace

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    Matrix v = otdistill::matmul(a->value, b->value);  // shape-checked
    return make(std::move(v), "matmul", {a, b}, [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        if (a.requires_grad) acc_into(a, otdistill::matmul(n.grad, otdistill::transpose(b.value)));
        if (b.requires_grad) acc_into(b, otdistill::matmul(otdistill::transpose(a.value), n.grad));
    });
}

NodePtr transpose(const NodePtr& a) {
    return make(otdistill::transpose(a->value), "transpose", {a},
                [](Node& n) { acc_into(*n.parents[0], otdistill::transpose(n.grad)); });
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
    return binary_ew(a, b, "add", [](double x, double y) { return x + y; }, [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        acc_into(a, n.grad);
        if (b.requires_grad) {
            const Bcast k = bcast_kind(a.value, b.value, "add");
            for (std::size_t r = 0; r < n.grad.rows(); ++r)
                for (std::size_t c = 0; c < n.grad.cols(); ++c)
                    b.grad[bindex(k, r, c, b.value.cols())] += n.grad.at(r, c);
        }
    });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    return binary_ew(a, b, "sub", [](double x, double y) { return x - y; }, [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        acc_into(a, n.grad);
        if (b.requires_grad) {
            const Bcast k = bcast_kind(a.value, b.value, "sub");
            for (std::size_t r = 0; r < n.grad.rows(); ++r)
                for (std::size_t c = 0; c < n.grad.cols(); ++c)
                    b.grad[bindex(k, r, c, b.value.cols())] -= n.grad.at(r, c);
        }
    });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    return binary_ew(a, b, "mul", [](double x, double y) { return x * y; }, [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        const Bcast k = bcast_kind(a.value, b.value, "mul");
        for (std::size_t r = 0; r < n.grad.rows(); ++r) {
            for (std::size_t c = 0; c < n.grad.cols(); ++c) {
                const double g = n.grad.at(r, c);
                const std::size_t bi = bindex(k, r, c, b.value.cols());
                if (a.requires_grad) a.grad.at(r, c) += g * b.value[bi];
                if (b.requires_grad) b.grad[bi] += g * a.value.at(r, c);
            }
        }
    });
}

NodePtr div(const NodePtr& a, const NodePtr& b) {
    return binary_ew(a, b, "div", [](double x, double y) { return x / y; }, [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        const Bcast k = bcast_kind(a.value, b.value, "div");
        for (std::size_t r = 0; r < n.grad.rows(); ++r) {
            for (std::size_t c = 0; c < n.grad.cols(); ++c) {
                const double g = n.grad.at(r, c);
                const std::size_t bi = bindex(k, r, c, b.value.cols());
                const double bvv = b.value[bi];
                if (a.requires_grad) a.grad.at(r, c) += g / bvv;
                if (b.requires_grad) b.grad[bi] -= g * a.value.at(r, c) / (bvv * bvv);
            }
        }
    });
}

NodePtr scalar_mul(const NodePtr& a, double s) {
    Matrix out = a->value;
    for (auto& x : out.data()) x *= s;
    out.validate("scalar_mul");
    return make(std::move(out), "scalar_mul", {a}, [s](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += s * n.grad[i];
    });
}

NodePtr scalar_add(const NodePtr& a, double s) {
    Matrix out = a->value;
    for (auto& x : out.data()) x += s;
    out.validate("scalar_add");
    return make(std::move(out), "scalar_add", {a},
                [](Node& n) { acc_into(*n.parents[0], n.grad); });
}

namespace {

template <class F, class G>
NodePtr unary_ew(const NodePtr& a, const char* op, F&& fwd, G&& dfd) {
    Matrix out = a->value;
    for (auto& x : out.data()) x = fwd(x);
    out.validate(op);
    auto n = make(std::move(out), op, {a}, nullptr);
    if (n->requires_grad) {
        n->backprop = [dfd](Node& n) {
            Node& a = *n.parents[0];
            if (!a.requires_grad) return;
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                a.grad[i] += n.grad[i] * dfd(a.value[i], n.value[i]);
        };
    }
    return n;
}

}  // namespace

NodePtr relu(const NodePtr& a) {
    return unary_ew(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

NodePtr tanh(const NodePtr& a) {
    return unary_ew(a, "tanh", [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

NodePtr sigmoid(const NodePtr& a) {
    return unary_ew(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

NodePtr log(const NodePtr& a) {
    return unary_ew(a, "log", [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

NodePtr square(const NodePtr& a) {
    return unary_ew(a, "square", [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

NodePtr sum_all(const NodePtr& a) {
    double s = 0.0;
    for (double x : a->value.data()) s += x;
    return make(Matrix(1, 1, {s}), "sum_all", {a}, [](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        const double g = n.grad[0];
        for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g;
    });
}

NodePtr mean_all(const NodePtr& a) {
    if (a->value.empty()) throw ContractError("mean_all: empty matrix");
    double s = 0.0;
    for (double x : a->value.data()) s += x;
    const double inv = 1.0 / static_cast<double>(a->value.size());
    return make(Matrix(1, 1, {s * inv}), "mean_all", {a}, [inv](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        const double g = n.grad[0] * inv;
        for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g;
    });
}

NodePtr row_sums(const NodePtr& a) {
    const Matrix& v = a->value;
    Matrix out(v.rows(), 1);
    for (std::size_t r = 0; r < v.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < v.cols(); ++c) s += v.at(r, c);
        out[r] = s;
    }
    out.validate("row_sums");
    return make(std::move(out), "row_sums", {a}, [](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        for (std::size_t r = 0; r < a.grad.rows(); ++r)
            for (std::size_t c = 0; c < a.grad.cols(); ++c) a.grad.at(r, c) += n.grad[r];
    });
}

NodePtr col_means(const NodePtr& a) {
    const Matrix& v = a->value;
    if (v.rows() == 0) throw ContractError("col_means: empty matrix");
    Matrix out(1, v.cols());
    for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) out[c] += v.at(r, c);
    const double inv = 1.0 / static_cast<double>(v.rows());
    for (std::size_t c = 0; c < v.cols(); ++c) out[c] *= inv;
    out.validate("col_means");
    return make(std::move(out), "col_means", {a}, [inv](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        for (std::size_t r = 0; r < a.grad.rows(); ++r)
            for (std::size_t c = 0; c < a.grad.cols(); ++c) a.grad.at(r, c) += n.grad[c] * inv;
    });
}

NodePtr rowwise_l2norm(const NodePtr& a) {
    const Matrix& v = a->value;
    if (v.empty()) throw ContractError("rowwise_l2norm: empty matrix");
    Matrix out(v.rows(), 1);
    for (std::size_t r = 0; r < v.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < v.cols(); ++c) s += v.at(r, c) * v.at(r, c);
        if (s == 0.0) {
            throw ZeroRowError("rowwise_l2norm: row " + std::to_string(r) +
                               " is all zeros; norm undefined for cosine normalization");
        }
        out[r] = std::sqrt(s);
    }
    out.validate("rowwise_l2norm");
    return make(std::move(out), "rowwise_l2norm", {a}, [](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        for (std::size_t r = 0; r < a.grad.rows(); ++r) {
            const double g = n.grad[r] / n.value[r];
            for (std::size_t c = 0; c < a.grad.cols(); ++c)
                a.grad.at(r, c) += g * a.value.at(r, c);
        }
    });
}

NodePtr pairwise_sqdist(const NodePtr& a, const NodePtr& b) {
    const Matrix& av = a->value;
    const Matrix& bv = b->value;
    if (av.cols() != bv.cols()) {
        throw DimensionError("pairwise_sqdist: column counts disagree, " + av.shape_str() +
                             " vs " + bv.shape_str());
    }
    Matrix out(av.rows(), bv.rows());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        for (std::size_t j = 0; j < bv.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < av.cols(); ++k) {
                const double d = av.at(i, k) - bv.at(j, k);
                s += d * d;
            }
            out.at(i, j) = s;
        }
    }
    out.validate("pairwise_sqdist");
    return make(std::move(out), "pairwise_sqdist", {a, b}, [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        for (std::size_t i = 0; i < a.value.rows(); ++i) {
            for (std::size_t j = 0; j < b.value.rows(); ++j) {
                const double g2 = 2.0 * n.grad.at(i, j);
                if (g2 == 0.0) continue;
                for (std::size_t k = 0; k < a.value.cols(); ++k) {
                    const double d = a.value.at(i, k) - b.value.at(j, k);
                    if (a.requires_grad) a.grad.at(i, k) += g2 * d;
                    if (b.requires_grad) b.grad.at(j, k) -= g2 * d;
                }
            }
        }
    });
}

NodePtr concat_cols(const std::vector<NodePtr>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t rows = parts[0]->value.rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p->value.rows() != rows) {
            throw DimensionError("concat_cols: row counts disagree, " +
                                 parts[0]->value.shape_str() + " vs " + p->value.shape_str());
        }
        cols += p->value.cols();
    }
    Matrix out(rows, cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < p->value.cols(); ++c)
                out.at(r, off + c) = p->value.at(r, c);
        off += p->value.cols();
    }
    return make(std::move(out), "concat_cols", parts, [](Node& n) {
        std::size_t off = 0;
        for (auto& pp : n.parents) {
            Node& p = *pp;
            if (p.requires_grad) {
                for (std::size_t r = 0; r < p.grad.rows(); ++r)
                    for (std::size_t c = 0; c < p.grad.cols(); ++c)
                        p.grad.at(r, c) += n.grad.at(r, off + c);
            }
            off += p.value.cols();
        }
    });
}

NodePtr gather_cols(const NodePtr& a, const std::vector<std::size_t>& indices) {
    const Matrix& v = a->value;
    for (std::size_t idx : indices) {
        if (idx >= v.cols()) {
            throw BoundsError("gather_cols: index " + std::to_string(idx) +
                              " out of range for " + v.shape_str() + " matrix");
        }
    }
    Matrix out(v.rows(), indices.size());
    for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t j = 0; j < indices.size(); ++j) out.at(r, j) = v.at(r, indices[j]);
    return make(std::move(out), "gather_cols", {a}, [indices](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        for (std::size_t r = 0; r < n.grad.rows(); ++r)
            for (std::size_t j = 0; j < indices.size(); ++j)
                a.grad.at(r, indices[j]) += n.grad.at(r, j);
    });
}

NodePtr softmax_rows(const NodePtr& a) {
    const Matrix& v = a->value;
    Matrix out(v.rows(), v.cols());
    for (std::size_t r = 0; r < v.rows(); ++r) {
        double m = v.at(r, 0);
        for (std::size_t c = 1; c < v.cols(); ++c) m = std::max(m, v.at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < v.cols(); ++c) {
            out.at(r, c) = std::exp(v.at(r, c) - m);
            z += out.at(r, c);
        }
        for (std::size_t c = 0; c < v.cols(); ++c) out.at(r, c) /= z;
    }
    out.validate("softmax_rows");
    return make(std::move(out), "softmax_rows", {a}, [](Node& n) {
        Node& a = *n.parents[0];
        if (!a.requires_grad) return;
        for (std::size_t r = 0; r < n.grad.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n.grad.cols(); ++c)
                dot += n.grad.at(r, c) * n.value.at(r, c);
            for (std::size_t c = 0; c < n.grad.cols(); ++c)
                a.grad.at(r, c) += n.value.at(r, c) * (n.grad.at(r, c) - dot);
        }
    });
}

NodePtr softmax_cross_entropy(const NodePtr& logits, const std::vector<std::size_t>& labels) {
    const Matrix& v = logits->value;
    if (labels.size() != v.rows()) {
        throw ContractError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                            " labels for " + std::to_string(v.rows()) + " rows");
    }
    double total = 0.0;
    Matrix probs(v.rows(), v.cols());
    for (std::size_t r = 0; r < v.rows(); ++r) {
        if (labels[r] >= v.cols()) {
            throw BoundsError("softmax_cross_entropy: label " + std::to_string(labels[r]) +
                              " out of range for " + std::to_string(v.cols()) + " classes");
        }
        double m = v.at(r, 0);
        for (std::size_t c = 1; c < v.cols(); ++c) m = std::max(m, v.at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < v.cols(); ++c) z += std::exp(v.at(r, c) - m);
        const double lse = m + std::log(z);
        total += lse - v.at(r, labels[r]);
        for (std::size_t c = 0; c < v.cols(); ++c)
            probs.at(r, c) = std::exp(v.at(r, c) - lse);
    }
    const double inv_b = 1.0 / static_cast<double>(v.rows());
    Matrix loss(1, 1, {total * inv_b});
    return make(std::move(loss), "softmax_cross_entropy", {logits},
                [labels, probs = std::move(probs), inv_b](Node& n) {
                    Node& a = *n.parents[0];
                    if (!a.requires_grad) return;
                    const double g = n.grad[0] * inv_b;
                    for (std::size_t r = 0; r < a.grad.rows(); ++r) {
                        for (std::size_t c = 0; c < a.grad.cols(); ++c)
                            a.grad.at(r, c) += g * probs.at(r, c);
                        a.grad.at(r, labels[r]) -= g;
                    }
                });
}

void backward(const NodePtr& loss) {
    if (loss->value.rows() != 1 || loss->value.cols() != 1) {
        throw ContractError("backward: loss must be 1x1, got " + loss->value.shape_str());
    }
    if (loss->backward_done) {
        throw ContractError("backward: repeated call on the same loss node; "
                            "rebuild the forward graph first");
    }
    loss->backward_done = true;
    if (!loss->requires_grad) return;  // nothing reachable wants gradients

    // Post-order (children after parents within `order`) via iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* node;
        std::size_t next;
    };
    std::vector<Frame> stack{{loss.get(), 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            Node* p = f.node->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Interior gradients are scratch for this pass; leaves accumulate.
    for (Node* n : order) {
        if (!n->is_leaf()) {
            for (auto& g : n->grad.data()) g = 0.0;
        }
    }
    loss->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

void zero_grad(const std::vector<NodePtr>& params) {
    for (const auto& p : params) {
        for (auto& g : p->grad.data()) g = 0.0;
    }
}

}  // namespace otdistill::ag
