#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace voxalign::ad {

using Mat = Eigen::MatrixXd;

class Tape;

// Lightweight handle into a Tape. Cheap to copy; invalid when default-constructed.
struct Var {
    Tape* tape = nullptr;
    int idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
    const Mat& val() const;
    Eigen::Index rows() const { return val().rows(); }
    Eigen::Index cols() const { return val().cols(); }
    double scalar() const;  // value of a 1x1 node
};

// Key mask for masked row-softmax: mask[j] != 0 means column j is a valid key.
using KeyMask = std::vector<uint8_t>;

// Define-by-run reverse-mode autodiff over dense double matrices. Values are
// computed eagerly as ops are recorded; backward() runs one reverse sweep.
// Gradients are only propagated into nodes whose `need` flag is set (leaves
// opt in; interior nodes inherit from their inputs).
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. `need` marks the node as requiring a gradient.
    Var leaf(Mat value, bool need = false);
    Var constant(Mat value) { return leaf(std::move(value), false); }
    Var scalar_leaf(double v, bool need = false);

    // Force gradient tracking on an already-created node. Must be called before
    // the node is consumed by downstream ops.
    void want_grad(Var v);

    // Elementwise / linear algebra.
    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var add_rowvec(Var a, Var row);  // row (1xC) broadcast over the rows of a
    Var sub(Var a, Var b);
    Var hadamard(Var a, Var b);
    Var scale(Var a, double c);
    Var mul_scalar(Var a, Var s);  // s is 1x1
    Var div_scalar(Var a, Var s);  // s is 1x1
    Var transpose(Var a);
    Var square(Var a);

    // Structure.
    Var concat_rows(std::span<const Var> parts);
    Var slice_rows(Var a, int start, int count);
    Var concat_cols(std::span<const Var> parts);
    Var slice_cols(Var a, int start, int count);
    Var stack_scalars(int rows, int cols, std::span<const Var> entries);  // row-major fill

    // Nonlinearities and reductions.
    Var row_softmax(Var a, const KeyMask* mask = nullptr);
    Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
    Var gelu(Var a);
    Var normalize_rows(Var a);  // l2 per row; throws DegenerateVector on ~zero rows
    Var sum(Var a);
    Var mean_all(Var a);
    Var logsumexp_rows(Var a);  // (N x M) -> (N x 1)
    Var diag(Var a);            // (N x N) -> (N x 1)
    Var dot(Var a, Var b);      // sum(a .* b) -> 1x1

    // Reverse sweep from a scalar root. May be called once per recorded graph.
    void backward(Var root);

    const Mat& value(Var v) const;
    // Gradient of the last backward() root w.r.t. v. Throws if v was not
    // tracked; returns a zero matrix if tracked but unreached.
    Mat grad(Var v) const;
    bool has_grad(Var v) const;

    void clear();
    size_t size() const { return nodes_.size(); }

private:
    enum class Op : uint8_t {
        Leaf, MatMul, Add, AddRow, Sub, Hadamard, ScaleC, MulS, DivS, Transpose,
        Square, ConcatRows, SliceRows, ConcatCols, SliceCols, StackScalars,
        RowSoftmax, LayerNorm, Gelu, NormalizeRows, Sum, MeanAll, LogSumExpRows,
        Diag, Dot,
    };

    struct Node {
        Op op = Op::Leaf;
        int a = -1, b = -1, c = -1;
        std::vector<int> ins;      // ConcatRows/ConcatCols/StackScalars
        Mat val;
        Mat grad;                  // allocated lazily during backward
        bool need = false;
        bool reached = false;      // grad allocated this sweep
        double c0 = 0.0;           // scale constant / epsilon
        int i0 = 0, i1 = 0;        // slice start / count, stack dims
        KeyMask mask;              // RowSoftmax
        Mat aux;                   // op-dependent cache (x_hat, inv_std, norms, ...)
        Mat aux2;
    };

    int push(Node n);
    Node& at(Var v);
    const Node& at(Var v) const;
    void check_same_shape(const Var& a, const Var& b, const char* who) const;
    Mat& grad_ref(int idx);  // allocate+zero on first touch
    void accumulate(Node& n);

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// Central finite difference of f at x with step h, matching the analytic
// gradient layout. f must be deterministic.
Mat finite_difference(const std::function<double(const Mat&)>& f, const Mat& x, double h = 1e-5);

}  // namespace voxalign::ad
