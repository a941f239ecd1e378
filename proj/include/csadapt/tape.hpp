#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "csadapt/errors.hpp"

namespace csadapt {

using Mat = Eigen::MatrixXd;

struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
};

// alpha*a + beta*b on scalars. Loss-composition code paths and the free loss
// functions both go through this helper so their results are bit-identical.
inline double mix2(double alpha, double a, double beta, double b) {
    return alpha * a + beta * b;
}

// Reverse-mode tape over dense double matrices. Values are computed eagerly;
// each op records a closure that scatters the output gradient back to its
// inputs. One tape per forward pass; backward() may be called once.
//
// requires_grad propagates from leaves: subgraphs that cannot reach a
// trainable leaf store no closures and allocate no gradients. A tape built
// with recording=false never stores closures (inference mode).
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    Var constant(Mat v) { return push(std::move(v), false); }

    Var leaf(Mat v, bool requires_grad) { return push(std::move(v), requires_grad && recording_); }

    const Mat& value(Var x) const { return nodes_[x.i].value; }

    bool requires_grad(Var x) const { return nodes_[x.i].requires_grad; }

    // Gradient of the last backward() root w.r.t. x. Zero matrix if x was
    // never reached (or does not require grad).
    const Mat& grad(Var x) {
        Node& n = nodes_[x.i];
        if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Var root) {
        Node& r = nodes_[root.i];
        if (r.value.rows() != 1 || r.value.cols() != 1)
            throw InternalError("backward root must be a 1x1 scalar");
        if (ran_backward_) throw InternalError("backward called twice on one tape");
        ran_backward_ = true;
        if (!r.requires_grad) return;  // nothing trainable feeds the root
        r.grad = Mat::Ones(1, 1);
        for (int i = root.i; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.grad.size() != 0 && n.backward) n.backward(*this);
        }
    }

    // ---- ops ----

    Var matmul(Var a, Var b) {
        const Mat &A = value(a), &B = value(b);
        if (A.cols() != B.rows()) throw ConfigError("matmul: inner dimensions mismatch");
        Mat out = A * B;
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oi, int ai, int bi) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, go * t.nodes_[bi].value.transpose());
            t.accum(bi, t.nodes_[ai].value.transpose() * go);
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        const Mat &A = value(a), &B = value(b);
        if (A.cols() != B.cols()) throw ConfigError("matmul_nt: dimensions mismatch");
        Mat out = A * B.transpose();
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oi, int ai, int bi) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, go * t.nodes_[bi].value);
            t.accum(bi, go.transpose() * t.nodes_[ai].value);
        });
    }

    Var add(Var a, Var b) {
        const Mat &A = value(a), &B = value(b);
        if (A.rows() != B.rows() || A.cols() != B.cols()) throw ConfigError("add: shape mismatch");
        Mat out = A + B;
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oi, int ai, int bi) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, go);
            t.accum(bi, go);
        });
    }

    Var sub(Var a, Var b) {
        const Mat &A = value(a), &B = value(b);
        if (A.rows() != B.rows() || A.cols() != B.cols()) throw ConfigError("sub: shape mismatch");
        Mat out = A - B;
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oi, int ai, int bi) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, go);
            t.accum(bi, -go);
        });
    }

    // broadcast a [1,c] row over every row of a
    Var add_rowvec(Var a, Var r) {
        const Mat &A = value(a), &R = value(r);
        if (R.rows() != 1 || R.cols() != A.cols()) throw ConfigError("add_rowvec: shape mismatch");
        Mat out = A.rowwise() + R.row(0);
        return unary_or_binary(std::move(out), a, r, [](Tape& t, int oi, int ai, int ri) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, go);
            t.accum(ri, go.colwise().sum());
        });
    }

    Var mul(Var a, Var b) {  // Hadamard
        const Mat &A = value(a), &B = value(b);
        if (A.rows() != B.rows() || A.cols() != B.cols()) throw ConfigError("mul: shape mismatch");
        Mat out = A.cwiseProduct(B);
        return unary_or_binary(std::move(out), a, b, [](Tape& t, int oi, int ai, int bi) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, go.cwiseProduct(t.nodes_[bi].value));
            t.accum(bi, go.cwiseProduct(t.nodes_[ai].value));
        });
    }

    // scale every row of a [n,c] by the matching entry of c [n,1]
    Var scale_rows(Var a, Var c) {
        const Mat &A = value(a), &C = value(c);
        if (C.cols() != 1 || C.rows() != A.rows()) throw ConfigError("scale_rows: shape mismatch");
        Mat out = A.array().colwise() * C.col(0).array();
        return unary_or_binary(std::move(out), a, c, [](Tape& t, int oi, int ai, int ci) {
            const Mat& go = t.nodes_[oi].grad;
            const Mat &A = t.nodes_[ai].value, &C = t.nodes_[ci].value;
            t.accum(ai, go.array().colwise() * C.col(0).array());
            t.accum(ci, go.cwiseProduct(A).rowwise().sum());
        });
    }

    Var scale(Var a, double s) {
        Mat out = value(a) * s;
        return unary(std::move(out), a, [s](Tape& t, int oi, int ai) {
            t.accum(ai, t.nodes_[oi].grad * s);
        });
    }

    Var add_const(Var a, const Mat& c) {
        const Mat& A = value(a);
        if (A.rows() != c.rows() || A.cols() != c.cols()) throw ConfigError("add_const: shape mismatch");
        Mat out = A + c;
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            t.accum(ai, t.nodes_[oi].grad);
        });
    }

    // ca*a + cb*b, same shapes
    Var affine2(double ca, Var a, double cb, Var b) {
        const Mat &A = value(a), &B = value(b);
        if (A.rows() != B.rows() || A.cols() != B.cols()) throw ConfigError("affine2: shape mismatch");
        Mat out = ca * A + cb * B;
        return unary_or_binary(std::move(out), a, b, [ca, cb](Tape& t, int oi, int ai, int bi) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, ca * go);
            t.accum(bi, cb * go);
        });
    }

    // ca*a + cb*b on 1x1 scalars, sharing mix2 with the free loss functions
    Var scalar_affine(double ca, Var a, double cb, Var b) {
        const Mat &A = value(a), &B = value(b);
        if (A.size() != 1 || B.size() != 1) throw InternalError("scalar_affine expects 1x1 inputs");
        Mat out(1, 1);
        out(0, 0) = mix2(ca, A(0, 0), cb, B(0, 0));
        return unary_or_binary(std::move(out), a, b, [ca, cb](Tape& t, int oi, int ai, int bi) {
            const Mat& go = t.nodes_[oi].grad;
            t.accum(ai, ca * go);
            t.accum(bi, cb * go);
        });
    }

    Var tanh_op(Var a) {
        Mat out = value(a).array().tanh();
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            const Mat& y = t.nodes_[oi].value;
            t.accum(ai, t.nodes_[oi].grad.cwiseProduct((1.0 - y.array().square()).matrix()));
        });
    }

    Var sigmoid(Var a) {
        Mat out = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            const Mat& y = t.nodes_[oi].value;
            t.accum(ai, t.nodes_[oi].grad.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
        });
    }

    // Elementwise natural log; inputs must be strictly positive.
    Var log_op(Var a) {
        Mat out = value(a).array().log();
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            t.accum(ai, (t.nodes_[oi].grad.array() / t.nodes_[ai].value.array()).matrix());
        });
    }

    Var gelu(Var a) {
        const double k = 0.7978845608028654;  // sqrt(2/pi)
        const double c = 0.044715;
        const Mat& x = value(a);
        Mat u = (k * (x.array() + c * x.array().cube())).matrix();
        Mat th = u.array().tanh();
        Mat out = (0.5 * x.array() * (1.0 + th.array())).matrix();
        return unary(std::move(out), a, [k, c](Tape& t, int oi, int ai) {
            const Mat& x = t.nodes_[ai].value;
            Eigen::ArrayXXd u = k * (x.array() + c * x.array().cube());
            Eigen::ArrayXXd th = u.tanh();
            Eigen::ArrayXXd d = 0.5 * (1.0 + th) + 0.5 * x.array() * (1.0 - th.square()) * k * (1.0 + 3.0 * c * x.array().square());
            t.accum(ai, t.nodes_[oi].grad.cwiseProduct(d.matrix()));
        });
    }

    Var softmax_rows(Var a) {
        const Mat& x = value(a);
        Mat out(x.rows(), x.cols());
        for (int i = 0; i < x.rows(); ++i) {
            double m = x.row(i).maxCoeff();
            Eigen::ArrayXd e = (x.row(i).array() - m).exp();
            out.row(i) = (e / e.sum()).matrix();
        }
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            const Mat& p = t.nodes_[oi].value;
            const Mat& go = t.nodes_[oi].grad;
            Mat dot = go.cwiseProduct(p).rowwise().sum();  // [n,1]
            t.accum(ai, p.cwiseProduct(go - dot.replicate(1, p.cols())));
        });
    }

    Var log_softmax_rows(Var a) {
        const Mat& x = value(a);
        Mat out(x.rows(), x.cols());
        for (int i = 0; i < x.rows(); ++i) {
            double m = x.row(i).maxCoeff();
            double lse = std::log((x.row(i).array() - m).exp().sum()) + m;
            out.row(i) = x.row(i).array() - lse;
        }
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            const Mat& lp = t.nodes_[oi].value;
            const Mat& go = t.nodes_[oi].grad;
            Mat rowsum = go.rowwise().sum();  // [n,1]
            t.accum(ai, go - lp.array().exp().matrix().cwiseProduct(rowsum.replicate(1, lp.cols())));
        });
    }

    // row-wise layer norm with learned gamma [1,c], beta [1,c]
    Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5) {
        const Mat &x = value(a), &g = value(gamma), &b = value(beta);
        if (g.rows() != 1 || g.cols() != x.cols() || b.rows() != 1 || b.cols() != x.cols())
            throw ConfigError("layer_norm: gamma/beta shape mismatch");
        const int n = static_cast<int>(x.rows()), c = static_cast<int>(x.cols());
        Mat xhat(n, c);
        Eigen::VectorXd inv_std(n);
        for (int i = 0; i < n; ++i) {
            double mu = x.row(i).mean();
            double var = (x.row(i).array() - mu).square().mean();
            inv_std(i) = 1.0 / std::sqrt(var + eps);
            xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
        }
        Mat out = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
        bool need = recording_ && (nodes_[a.i].requires_grad || nodes_[gamma.i].requires_grad || nodes_[beta.i].requires_grad);
        Var o = push(std::move(out), need);
        if (need) {
            int ai = a.i, gi = gamma.i, bi = beta.i, oi = o.i;
            // keep xhat/inv_std; recomputation would duplicate the row stats
            auto xh = std::make_shared<Mat>(std::move(xhat));
            auto is = std::make_shared<Eigen::VectorXd>(std::move(inv_std));
            nodes_[oi].backward = [ai, gi, bi, oi, xh, is](Tape& t) {
                const Mat& go = t.nodes_[oi].grad;
                const Mat& g = t.nodes_[gi].value;
                const int c = static_cast<int>(go.cols());
                t.accum(gi, go.cwiseProduct(*xh).colwise().sum());
                t.accum(bi, go.colwise().sum());
                if (t.nodes_[ai].requires_grad) {
                    Mat dy = go.array().rowwise() * g.row(0).array();  // dL/dxhat
                    Mat s1 = dy.rowwise().sum();                      // [n,1]
                    Mat s2 = dy.cwiseProduct(*xh).rowwise().sum();    // [n,1]
                    Mat dx(go.rows(), c);
                    for (int i = 0; i < go.rows(); ++i)
                        dx.row(i) = (*is)(i) * (dy.row(i).array() - s1(i, 0) / c - xh->row(i).array() * s2(i, 0) / c);
                    t.accum(ai, dx);
                }
            };
        }
        return o;
    }

    Var slice_rows(Var a, int r0, int nr) {
        const Mat& A = value(a);
        if (r0 < 0 || nr < 0 || r0 + nr > A.rows()) throw ConfigError("slice_rows: out of range");
        Mat out = A.middleRows(r0, nr);
        return unary(std::move(out), a, [r0, nr](Tape& t, int oi, int ai) {
            const Mat& A = t.nodes_[ai].value;
            Mat z = Mat::Zero(A.rows(), A.cols());
            z.middleRows(r0, nr) = t.nodes_[oi].grad;
            t.accum(ai, z);
        });
    }

    Var slice_cols(Var a, int c0, int nc) {
        const Mat& A = value(a);
        if (c0 < 0 || nc < 0 || c0 + nc > A.cols()) throw ConfigError("slice_cols: out of range");
        Mat out = A.middleCols(c0, nc);
        return unary(std::move(out), a, [c0, nc](Tape& t, int oi, int ai) {
            const Mat& A = t.nodes_[ai].value;
            Mat z = Mat::Zero(A.rows(), A.cols());
            z.middleCols(c0, nc) = t.nodes_[oi].grad;
            t.accum(ai, z);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ConfigError("concat_cols: empty");
        int rows = static_cast<int>(value(parts[0]).rows()), cols = 0;
        bool need = false;
        for (Var p : parts) {
            if (value(p).rows() != rows) throw ConfigError("concat_cols: row mismatch");
            cols += static_cast<int>(value(p).cols());
            need = need || nodes_[p.i].requires_grad;
        }
        Mat out(rows, cols);
        int c = 0;
        for (Var p : parts) {
            out.middleCols(c, value(p).cols()) = value(p);
            c += static_cast<int>(value(p).cols());
        }
        need = need && recording_;
        Var o = push(std::move(out), need);
        if (need) {
            std::vector<int> idx;
            std::vector<int> widths;
            for (Var p : parts) {
                idx.push_back(p.i);
                widths.push_back(static_cast<int>(value(p).cols()));
            }
            int oi = o.i;
            nodes_[oi].backward = [idx, widths, oi](Tape& t) {
                const Mat& go = t.nodes_[oi].grad;
                int c = 0;
                for (size_t k = 0; k < idx.size(); ++k) {
                    t.accum(idx[k], go.middleCols(c, widths[k]));
                    c += widths[k];
                }
            };
        }
        return o;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw ConfigError("concat_rows: empty");
        int cols = static_cast<int>(value(parts[0]).cols()), rows = 0;
        bool need = false;
        for (Var p : parts) {
            if (value(p).cols() != cols) throw ConfigError("concat_rows: col mismatch");
            rows += static_cast<int>(value(p).rows());
            need = need || nodes_[p.i].requires_grad;
        }
        Mat out(rows, cols);
        int r = 0;
        for (Var p : parts) {
            out.middleRows(r, value(p).rows()) = value(p);
            r += static_cast<int>(value(p).rows());
        }
        need = need && recording_;
        Var o = push(std::move(out), need);
        if (need) {
            std::vector<int> idx, heights;
            for (Var p : parts) {
                idx.push_back(p.i);
                heights.push_back(static_cast<int>(value(p).rows()));
            }
            int oi = o.i;
            nodes_[oi].backward = [idx, heights, oi](Tape& t) {
                const Mat& go = t.nodes_[oi].grad;
                int r = 0;
                for (size_t k = 0; k < idx.size(); ++k) {
                    t.accum(idx[k], go.middleRows(r, heights[k]));
                    r += heights[k];
                }
            };
        }
        return o;
    }

    Var gather_rows(Var table, const std::vector<int>& ids) {
        const Mat& T = value(table);
        Mat out(static_cast<int>(ids.size()), T.cols());
        for (size_t k = 0; k < ids.size(); ++k) {
            if (ids[k] < 0 || ids[k] >= T.rows()) throw InputError("gather_rows: id out of range");
            out.row(static_cast<int>(k)) = T.row(ids[k]);
        }
        return unary(std::move(out), table, [ids](Tape& t, int oi, int ti) {
            const Mat& T = t.nodes_[ti].value;
            const Mat& go = t.nodes_[oi].grad;
            Mat z = Mat::Zero(T.rows(), T.cols());
            for (size_t k = 0; k < ids.size(); ++k) z.row(ids[k]) += go.row(static_cast<int>(k));
            t.accum(ti, z);
        });
    }

    // out[k,0] = a[k, cols[k]]
    Var pick_per_row(Var a, const std::vector<int>& cols) {
        const Mat& A = value(a);
        if (static_cast<int>(cols.size()) != A.rows()) throw ConfigError("pick_per_row: size mismatch");
        Mat out(A.rows(), 1);
        for (int k = 0; k < A.rows(); ++k) {
            if (cols[k] < 0 || cols[k] >= A.cols()) throw InputError("pick_per_row: column out of range");
            out(k, 0) = A(k, cols[k]);
        }
        return unary(std::move(out), a, [cols](Tape& t, int oi, int ai) {
            const Mat& A = t.nodes_[ai].value;
            const Mat& go = t.nodes_[oi].grad;
            Mat z = Mat::Zero(A.rows(), A.cols());
            for (int k = 0; k < A.rows(); ++k) z(k, cols[k]) += go(k, 0);
            t.accum(ai, z);
        });
    }

    Var mean_rows(Var a) {
        const Mat& A = value(a);
        if (A.rows() == 0) throw ConfigError("mean_rows: empty");
        Mat out = A.colwise().mean();
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            const Mat& A = t.nodes_[ai].value;
            t.accum(ai, t.nodes_[oi].grad.replicate(A.rows(), 1) / static_cast<double>(A.rows()));
        });
    }

    Var sum_all(Var a) {
        Mat out(1, 1);
        out(0, 0) = value(a).sum();
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            const Mat& A = t.nodes_[ai].value;
            t.accum(ai, Mat::Constant(A.rows(), A.cols(), t.nodes_[oi].grad(0, 0)));
        });
    }

    Var mean_all(Var a) {
        const Mat& A = value(a);
        Mat out(1, 1);
        out(0, 0) = A.mean();
        return unary(std::move(out), a, [](Tape& t, int oi, int ai) {
            const Mat& A = t.nodes_[ai].value;
            double s = t.nodes_[oi].grad(0, 0) / static_cast<double>(A.size());
            t.accum(ai, Mat::Constant(A.rows(), A.cols(), s));
        });
    }

    // Custom single-input op: `out` was computed from value(a) by the caller;
    // bw maps (input value, output grad) to the input grad.
    Var custom_unary(Var a, Mat out, std::function<Mat(const Mat& in, const Mat& gout)> bw) {
        return unary(std::move(out), a, [bw = std::move(bw)](Tape& t, int oi, int ai) {
            t.accum(ai, bw(t.nodes_[ai].value, t.nodes_[oi].grad));
        });
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    Var push(Mat v, bool rg) {
        nodes_.push_back(Node{std::move(v), Mat(), rg, nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void accum(int i, const Mat& g) {
        Node& n = nodes_[i];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    template <typename F>
    Var unary(Mat out, Var a, F&& bw) {
        bool need = recording_ && nodes_[a.i].requires_grad;
        Var o = push(std::move(out), need);
        if (need) {
            int ai = a.i, oi = o.i;
            nodes_[oi].backward = [ai, oi, bw = std::forward<F>(bw)](Tape& t) { bw(t, oi, ai); };
        }
        return o;
    }

    template <typename F>
    Var unary_or_binary(Mat out, Var a, Var b, F&& bw) {
        bool need = recording_ && (nodes_[a.i].requires_grad || nodes_[b.i].requires_grad);
        Var o = push(std::move(out), need);
        if (need) {
            int ai = a.i, bi = b.i, oi = o.i;
            nodes_[oi].backward = [ai, bi, oi, bw = std::forward<F>(bw)](Tape& t) { bw(t, oi, ai, bi); };
        }
        return o;
    }

    std::vector<Node> nodes_;
    bool recording_ = true;
    bool ran_backward_ = false;
};

}  // namespace csadapt
