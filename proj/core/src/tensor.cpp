#include "voxalign/tensor.hpp"

#include <cmath>
#include <string>

#include "voxalign/errors.hpp"

namespace voxalign::ad {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kNormFloor = 1e-12;
}  // namespace

const Mat& Var::val() const { return tape->value(*this); }

double Var::scalar() const {
    const Mat& m = val();
    if (m.rows() != 1 || m.cols() != 1) throw InvalidArgument("scalar(): node is not 1x1");
    return m(0, 0);
}

int Tape::push(Node n) {
    if (backward_done_) throw InvalidArgument("tape: cannot record after backward(); clear() first");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tape::Node& Tape::at(Var v) {
    if (v.tape != this || v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
        throw InvalidArgument("tape: foreign or invalid Var");
    return nodes_[static_cast<size_t>(v.idx)];
}

const Tape::Node& Tape::at(Var v) const {
    return const_cast<Tape*>(this)->at(v);
}

const Mat& Tape::value(Var v) const { return at(v).val; }

void Tape::check_same_shape(const Var& a, const Var& b, const char* who) const {
    const Mat& ma = at(a).val;
    const Mat& mb = at(b).val;
    if (ma.rows() != mb.rows() || ma.cols() != mb.cols())
        throw InvalidArgument(std::string(who) + ": shape mismatch " + std::to_string(ma.rows()) + "x" +
                              std::to_string(ma.cols()) + " vs " + std::to_string(mb.rows()) + "x" +
                              std::to_string(mb.cols()));
}

Var Tape::leaf(Mat value, bool need) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(value);
    n.need = need;
    return {this, push(std::move(n))};
}

Var Tape::scalar_leaf(double v, bool need) {
    Mat m(1, 1);
    m(0, 0) = v;
    return leaf(std::move(m), need);
}

void Tape::want_grad(Var v) { at(v).need = true; }

Var Tape::matmul(Var a, Var b) {
    const Node& na = at(a);
    const Node& nb = at(b);
    if (na.val.cols() != nb.val.rows()) throw InvalidArgument("matmul: inner dimension mismatch");
    Node n;
    n.op = Op::MatMul;
    n.a = a.idx;
    n.b = b.idx;
    n.need = na.need || nb.need;
    n.val.noalias() = na.val * nb.val;
    return {this, push(std::move(n))};
}

Var Tape::add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Node n;
    n.op = Op::Add;
    n.a = a.idx;
    n.b = b.idx;
    n.need = at(a).need || at(b).need;
    n.val = at(a).val + at(b).val;
    return {this, push(std::move(n))};
}

Var Tape::add_rowvec(Var a, Var row) {
    const Node& na = at(a);
    const Node& nr = at(row);
    if (nr.val.rows() != 1 || nr.val.cols() != na.val.cols())
        throw InvalidArgument("add_rowvec: bias must be 1 x cols(a)");
    Node n;
    n.op = Op::AddRow;
    n.a = a.idx;
    n.b = row.idx;
    n.need = na.need || nr.need;
    n.val = na.val.rowwise() + nr.val.row(0);
    return {this, push(std::move(n))};
}

Var Tape::sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Node n;
    n.op = Op::Sub;
    n.a = a.idx;
    n.b = b.idx;
    n.need = at(a).need || at(b).need;
    n.val = at(a).val - at(b).val;
    return {this, push(std::move(n))};
}

Var Tape::hadamard(Var a, Var b) {
    check_same_shape(a, b, "hadamard");
    Node n;
    n.op = Op::Hadamard;
    n.a = a.idx;
    n.b = b.idx;
    n.need = at(a).need || at(b).need;
    n.val = at(a).val.cwiseProduct(at(b).val);
    return {this, push(std::move(n))};
}

Var Tape::scale(Var a, double c) {
    Node n;
    n.op = Op::ScaleC;
    n.a = a.idx;
    n.c0 = c;
    n.need = at(a).need;
    n.val = at(a).val * c;
    return {this, push(std::move(n))};
}

Var Tape::mul_scalar(Var a, Var s) {
    if (at(s).val.size() != 1) throw InvalidArgument("mul_scalar: s must be 1x1");
    Node n;
    n.op = Op::MulS;
    n.a = a.idx;
    n.b = s.idx;
    n.need = at(a).need || at(s).need;
    n.val = at(a).val * at(s).val(0, 0);
    return {this, push(std::move(n))};
}

Var Tape::div_scalar(Var a, Var s) {
    if (at(s).val.size() != 1) throw InvalidArgument("div_scalar: s must be 1x1");
    double sv = at(s).val(0, 0);
    if (sv == 0.0) throw InvalidArgument("div_scalar: division by zero");
    Node n;
    n.op = Op::DivS;
    n.a = a.idx;
    n.b = s.idx;
    n.need = at(a).need || at(s).need;
    n.val = at(a).val / sv;
    return {this, push(std::move(n))};
}

Var Tape::transpose(Var a) {
    Node n;
    n.op = Op::Transpose;
    n.a = a.idx;
    n.need = at(a).need;
    n.val = at(a).val.transpose();
    return {this, push(std::move(n))};
}

Var Tape::square(Var a) {
    Node n;
    n.op = Op::Square;
    n.a = a.idx;
    n.need = at(a).need;
    n.val = at(a).val.cwiseProduct(at(a).val);
    return {this, push(std::move(n))};
}

Var Tape::concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw InvalidArgument("concat_rows: empty");
    Eigen::Index cols = at(parts[0]).val.cols();
    Eigen::Index rows = 0;
    bool need = false;
    for (const Var& p : parts) {
        const Node& np = at(p);
        if (np.val.cols() != cols) throw InvalidArgument("concat_rows: column mismatch");
        rows += np.val.rows();
        need = need || np.need;
    }
    Node n;
    n.op = Op::ConcatRows;
    n.need = need;
    n.val.resize(rows, cols);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        const Mat& m = at(p).val;
        n.val.middleRows(r, m.rows()) = m;
        r += m.rows();
        n.ins.push_back(p.idx);
    }
    return {this, push(std::move(n))};
}

Var Tape::slice_rows(Var a, int start, int count) {
    const Node& na = at(a);
    if (start < 0 || count < 0 || start + count > na.val.rows())
        throw InvalidArgument("slice_rows: out of range");
    Node n;
    n.op = Op::SliceRows;
    n.a = a.idx;
    n.i0 = start;
    n.i1 = count;
    n.need = na.need;
    n.val = na.val.middleRows(start, count);
    return {this, push(std::move(n))};
}

Var Tape::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols: empty");
    Eigen::Index rows = at(parts[0]).val.rows();
    Eigen::Index cols = 0;
    bool need = false;
    for (const Var& p : parts) {
        const Node& np = at(p);
        if (np.val.rows() != rows) throw InvalidArgument("concat_cols: row mismatch");
        cols += np.val.cols();
        need = need || np.need;
    }
    Node n;
    n.op = Op::ConcatCols;
    n.need = need;
    n.val.resize(rows, cols);
    Eigen::Index c = 0;
    for (const Var& p : parts) {
        const Mat& m = at(p).val;
        n.val.middleCols(c, m.cols()) = m;
        c += m.cols();
        n.ins.push_back(p.idx);
    }
    return {this, push(std::move(n))};
}

Var Tape::slice_cols(Var a, int start, int count) {
    const Node& na = at(a);
    if (start < 0 || count < 0 || start + count > na.val.cols())
        throw InvalidArgument("slice_cols: out of range");
    Node n;
    n.op = Op::SliceCols;
    n.a = a.idx;
    n.i0 = start;
    n.i1 = count;
    n.need = na.need;
    n.val = na.val.middleCols(start, count);
    return {this, push(std::move(n))};
}

Var Tape::stack_scalars(int rows, int cols, std::span<const Var> entries) {
    if (static_cast<int>(entries.size()) != rows * cols)
        throw InvalidArgument("stack_scalars: entry count mismatch");
    Node n;
    n.op = Op::StackScalars;
    n.i0 = rows;
    n.i1 = cols;
    n.val.resize(rows, cols);
    bool need = false;
    for (int k = 0; k < rows * cols; ++k) {
        const Node& ne = at(entries[static_cast<size_t>(k)]);
        if (ne.val.size() != 1) throw InvalidArgument("stack_scalars: entries must be 1x1");
        n.val(k / cols, k % cols) = ne.val(0, 0);
        need = need || ne.need;
        n.ins.push_back(entries[static_cast<size_t>(k)].idx);
    }
    n.need = need;
    return {this, push(std::move(n))};
}

Var Tape::row_softmax(Var a, const KeyMask* mask) {
    const Node& na = at(a);
    const Eigen::Index R = na.val.rows(), C = na.val.cols();
    if (mask != nullptr && static_cast<Eigen::Index>(mask->size()) != C)
        throw InvalidArgument("row_softmax: mask size must equal column count");
    Node n;
    n.op = Op::RowSoftmax;
    n.a = a.idx;
    n.need = na.need;
    if (mask != nullptr) n.mask = *mask;
    n.val.resize(R, C);
    for (Eigen::Index i = 0; i < R; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < C; ++j) {
            if (mask == nullptr || (*mask)[static_cast<size_t>(j)]) mx = std::max(mx, na.val(i, j));
        }
        if (!std::isfinite(mx)) throw InvalidArgument("row_softmax: all key positions masked");
        double sum = 0.0;
        for (Eigen::Index j = 0; j < C; ++j) {
            if (mask == nullptr || (*mask)[static_cast<size_t>(j)]) {
                double e = std::exp(na.val(i, j) - mx);
                n.val(i, j) = e;
                sum += e;
            } else {
                n.val(i, j) = 0.0;
            }
        }
        n.val.row(i) /= sum;
    }
    return {this, push(std::move(n))};
}

Var Tape::layer_norm(Var a, Var gamma, Var beta, double eps) {
    const Node& na = at(a);
    const Eigen::Index R = na.val.rows(), C = na.val.cols();
    if (at(gamma).val.rows() != 1 || at(gamma).val.cols() != C ||
        at(beta).val.rows() != 1 || at(beta).val.cols() != C)
        throw InvalidArgument("layer_norm: gamma/beta must be 1 x cols(a)");
    Node n;
    n.op = Op::LayerNorm;
    n.a = a.idx;
    n.b = gamma.idx;
    n.c = beta.idx;
    n.c0 = eps;
    n.need = na.need || at(gamma).need || at(beta).need;
    n.aux.resize(R, C);   // x_hat
    n.aux2.resize(R, 1);  // inv_std
    n.val.resize(R, C);
    for (Eigen::Index i = 0; i < R; ++i) {
        double mu = na.val.row(i).mean();
        double var = (na.val.row(i).array() - mu).square().mean();
        double inv_std = 1.0 / std::sqrt(var + eps);
        n.aux2(i, 0) = inv_std;
        n.aux.row(i) = (na.val.row(i).array() - mu) * inv_std;
        n.val.row(i) = n.aux.row(i).cwiseProduct(at(gamma).val.row(0)) + at(beta).val.row(0);
    }
    return {this, push(std::move(n))};
}

Var Tape::gelu(Var a) {
    const Node& na = at(a);
    Node n;
    n.op = Op::Gelu;
    n.a = a.idx;
    n.need = na.need;
    n.val = na.val.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
    return {this, push(std::move(n))};
}

Var Tape::normalize_rows(Var a) {
    const Node& na = at(a);
    const Eigen::Index R = na.val.rows();
    Node n;
    n.op = Op::NormalizeRows;
    n.a = a.idx;
    n.need = na.need;
    n.aux.resize(R, 1);
    n.val.resizeLike(na.val);
    for (Eigen::Index i = 0; i < R; ++i) {
        double norm = na.val.row(i).norm();
        if (norm < kNormFloor) throw DegenerateVector("normalize_rows: (near-)zero row norm");
        n.aux(i, 0) = norm;
        n.val.row(i) = na.val.row(i) / norm;
    }
    return {this, push(std::move(n))};
}

Var Tape::sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.a = a.idx;
    n.need = at(a).need;
    n.val = Mat::Constant(1, 1, at(a).val.sum());
    return {this, push(std::move(n))};
}

Var Tape::mean_all(Var a) {
    Node n;
    n.op = Op::MeanAll;
    n.a = a.idx;
    n.need = at(a).need;
    n.val = Mat::Constant(1, 1, at(a).val.mean());
    return {this, push(std::move(n))};
}

Var Tape::logsumexp_rows(Var a) {
    const Node& na = at(a);
    const Eigen::Index R = na.val.rows(), C = na.val.cols();
    Node n;
    n.op = Op::LogSumExpRows;
    n.a = a.idx;
    n.need = na.need;
    n.val.resize(R, 1);
    n.aux.resize(R, C);  // softmax rows, reused in backward
    for (Eigen::Index i = 0; i < R; ++i) {
        double mx = na.val.row(i).maxCoeff();
        Eigen::ArrayXd e = (na.val.row(i).array() - mx).exp();
        double s = e.sum();
        n.val(i, 0) = mx + std::log(s);
        n.aux.row(i) = (e / s).matrix();
    }
    return {this, push(std::move(n))};
}

Var Tape::diag(Var a) {
    const Node& na = at(a);
    if (na.val.rows() != na.val.cols()) throw InvalidArgument("diag: matrix must be square");
    Node n;
    n.op = Op::Diag;
    n.a = a.idx;
    n.need = na.need;
    n.val = na.val.diagonal();
    return {this, push(std::move(n))};
}

Var Tape::dot(Var a, Var b) {
    check_same_shape(a, b, "dot");
    Node n;
    n.op = Op::Dot;
    n.a = a.idx;
    n.b = b.idx;
    n.need = at(a).need || at(b).need;
    n.val = Mat::Constant(1, 1, at(a).val.cwiseProduct(at(b).val).sum());
    return {this, push(std::move(n))};
}

Mat& Tape::grad_ref(int idx) {
    Node& n = nodes_[static_cast<size_t>(idx)];
    if (!n.reached) {
        n.grad = Mat::Zero(n.val.rows(), n.val.cols());
        n.reached = true;
    }
    return n.grad;
}

void Tape::accumulate(Node& n) {
    auto needs = [&](int i) { return i >= 0 && nodes_[static_cast<size_t>(i)].need; };
    const Mat& g = n.grad;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            if (needs(n.a)) grad_ref(n.a).noalias() += g * nodes_[static_cast<size_t>(n.b)].val.transpose();
            if (needs(n.b)) grad_ref(n.b).noalias() += nodes_[static_cast<size_t>(n.a)].val.transpose() * g;
            break;
        }
        case Op::Add:
            if (needs(n.a)) grad_ref(n.a) += g;
            if (needs(n.b)) grad_ref(n.b) += g;
            break;
        case Op::AddRow:
            if (needs(n.a)) grad_ref(n.a) += g;
            if (needs(n.b)) grad_ref(n.b).row(0) += g.colwise().sum();
            break;
        case Op::Sub:
            if (needs(n.a)) grad_ref(n.a) += g;
            if (needs(n.b)) grad_ref(n.b) -= g;
            break;
        case Op::Hadamard:
            if (needs(n.a)) grad_ref(n.a) += g.cwiseProduct(nodes_[static_cast<size_t>(n.b)].val);
            if (needs(n.b)) grad_ref(n.b) += g.cwiseProduct(nodes_[static_cast<size_t>(n.a)].val);
            break;
        case Op::ScaleC:
            if (needs(n.a)) grad_ref(n.a) += g * n.c0;
            break;
        case Op::MulS: {
            double sv = nodes_[static_cast<size_t>(n.b)].val(0, 0);
            if (needs(n.a)) grad_ref(n.a) += g * sv;
            if (needs(n.b)) grad_ref(n.b)(0, 0) += g.cwiseProduct(nodes_[static_cast<size_t>(n.a)].val).sum();
            break;
        }
        case Op::DivS: {
            double sv = nodes_[static_cast<size_t>(n.b)].val(0, 0);
            if (needs(n.a)) grad_ref(n.a) += g / sv;
            if (needs(n.b))
                grad_ref(n.b)(0, 0) -= g.cwiseProduct(nodes_[static_cast<size_t>(n.a)].val).sum() / (sv * sv);
            break;
        }
        case Op::Transpose:
            if (needs(n.a)) grad_ref(n.a) += g.transpose();
            break;
        case Op::Square:
            if (needs(n.a)) grad_ref(n.a) += 2.0 * g.cwiseProduct(nodes_[static_cast<size_t>(n.a)].val);
            break;
        case Op::ConcatRows: {
            Eigen::Index r = 0;
            for (int in : n.ins) {
                Node& ni = nodes_[static_cast<size_t>(in)];
                if (ni.need) grad_ref(in) += g.middleRows(r, ni.val.rows());
                r += ni.val.rows();
            }
            break;
        }
        case Op::SliceRows:
            if (needs(n.a)) grad_ref(n.a).middleRows(n.i0, n.i1) += g;
            break;
        case Op::ConcatCols: {
            Eigen::Index c = 0;
            for (int in : n.ins) {
                Node& ni = nodes_[static_cast<size_t>(in)];
                if (ni.need) grad_ref(in) += g.middleCols(c, ni.val.cols());
                c += ni.val.cols();
            }
            break;
        }
        case Op::SliceCols:
            if (needs(n.a)) grad_ref(n.a).middleCols(n.i0, n.i1) += g;
            break;
        case Op::StackScalars: {
            for (int k = 0; k < n.i0 * n.i1; ++k) {
                int in = n.ins[static_cast<size_t>(k)];
                if (nodes_[static_cast<size_t>(in)].need) grad_ref(in)(0, 0) += g(k / n.i1, k % n.i1);
            }
            break;
        }
        case Op::RowSoftmax: {
            if (!needs(n.a)) break;
            Mat& da = grad_ref(n.a);
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                double inner = g.row(i).cwiseProduct(n.val.row(i)).sum();
                da.row(i) += (n.val.row(i).array() * (g.row(i).array() - inner)).matrix();
            }
            break;
        }
        case Op::LayerNorm: {
            const Mat& gamma = nodes_[static_cast<size_t>(n.b)].val;
            const Eigen::Index C = g.cols();
            if (needs(n.b)) grad_ref(n.b).row(0) += g.cwiseProduct(n.aux).colwise().sum();
            if (needs(n.c)) grad_ref(n.c).row(0) += g.colwise().sum();
            if (needs(n.a)) {
                Mat& da = grad_ref(n.a);
                for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    Eigen::RowVectorXd gg = g.row(i).cwiseProduct(gamma.row(0));
                    double m1 = gg.mean();
                    double m2 = gg.cwiseProduct(n.aux.row(i)).mean();
                    da.row(i) +=
                        n.aux2(i, 0) *
                        (gg - Eigen::RowVectorXd::Constant(C, m1) - n.aux.row(i) * m2);
                }
            }
            break;
        }
        case Op::Gelu: {
            if (!needs(n.a)) break;
            const Mat& x = nodes_[static_cast<size_t>(n.a)].val;
            grad_ref(n.a) += g.cwiseProduct(x.unaryExpr([](double v) {
                double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                return phi + v * pdf;
            }));
            break;
        }
        case Op::NormalizeRows: {
            if (!needs(n.a)) break;
            Mat& da = grad_ref(n.a);
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                double inner = g.row(i).cwiseProduct(n.val.row(i)).sum();
                da.row(i) += (g.row(i) - n.val.row(i) * inner) / n.aux(i, 0);
            }
            break;
        }
        case Op::Sum:
            if (needs(n.a)) grad_ref(n.a).array() += g(0, 0);
            break;
        case Op::MeanAll:
            if (needs(n.a)) {
                const Node& na = nodes_[static_cast<size_t>(n.a)];
                grad_ref(n.a).array() += g(0, 0) / static_cast<double>(na.val.size());
            }
            break;
        case Op::LogSumExpRows: {
            if (!needs(n.a)) break;
            Mat& da = grad_ref(n.a);
            for (Eigen::Index i = 0; i < n.aux.rows(); ++i) da.row(i) += g(i, 0) * n.aux.row(i);
            break;
        }
        case Op::Diag: {
            if (!needs(n.a)) break;
            Mat& da = grad_ref(n.a);
            for (Eigen::Index i = 0; i < g.rows(); ++i) da(i, i) += g(i, 0);
            break;
        }
        case Op::Dot:
            if (needs(n.a)) grad_ref(n.a) += g(0, 0) * nodes_[static_cast<size_t>(n.b)].val;
            if (needs(n.b)) grad_ref(n.b) += g(0, 0) * nodes_[static_cast<size_t>(n.a)].val;
            break;
    }
}

void Tape::backward(Var root) {
    Node& r = at(root);
    if (r.val.size() != 1) throw InvalidArgument("backward: root must be 1x1");
    if (backward_done_) throw InvalidArgument("backward: already run; clear() first");
    if (!r.need) throw InvalidArgument("backward: root does not depend on any tracked node");
    backward_done_ = true;
    grad_ref(root.idx)(0, 0) = 1.0;
    for (int i = root.idx; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.reached && n.need) accumulate(n);
    }
}

Mat Tape::grad(Var v) const {
    const Node& n = at(v);
    if (!n.need) throw InvalidArgument("grad: node was not tracked (need=false)");
    if (!n.reached) return Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
}

bool Tape::has_grad(Var v) const { return at(v).reached; }

void Tape::clear() {
    nodes_.clear();
    backward_done_ = false;
}

Mat finite_difference(const std::function<double(const Mat&)>& f, const Mat& x, double h) {
    Mat g(x.rows(), x.cols());
    Mat xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        double orig = xp(i);
        xp(i) = orig + h;
        double fp = f(xp);
        xp(i) = orig - h;
        double fm = f(xp);
        xp(i) = orig;
        g(i) = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace voxalign::ad
