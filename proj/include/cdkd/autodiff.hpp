#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// float64 tensors.
//
// A primitive applied while a Tape is active on the calling thread appends a
// record when any input requires a gradient. Without an active tape the
// primitive only computes its forward value, which is how inference runs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cdkd::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class OpKind {
  kMatmul,
  kBiasAdd,
  kConv2d,
  kRelu,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kXLogX,
  kAdd,
  kSub,
  kMul,
  kScale,
  kShift,
  kConcat,
  kSlice,
  kChannelScale,
  kGlobalAvgPool,
  kAvgPool,
  kL2Normalize,
  kSum,
  kMean,
  kSumLastAxis,
  kReshape,
  kGradReverse,
};

std::string_view op_name(OpKind kind);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated (zeroed) on first use
  bool requires_grad = false;
  // Set whenever backprop deposits a gradient; cleared by zero_grad.
  bool grad_touched = false;
  std::uint64_t tape_id = 0;
  std::int64_t record = -1;  // producing record, -1 for leaves

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Direct write access for optimizers and initializers. Must not be used
  /// on a tensor whose value was saved by a live tape record.
  std::span<double> mutable_values();
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool grad_touched() const;
  void zero_grad();

  /// Fresh leaf holding a copy of the values, outside any tape.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<void(const std::vector<std::shared_ptr<Node>>& inputs,
                                      const Node& output)>;

struct Record {
  OpKind kind;
  std::vector<std::shared_ptr<Node>> inputs;
  std::shared_ptr<Node> output;
  BackwardFn backward;
  bool consumed = false;
};

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t index) const { return records_.at(index); }

  /// Appends a record producing `output`. Returns the output with its tape
  /// linkage set.
  Tensor append(OpKind kind, const std::vector<Tensor>& inputs, Tensor output,
                BackwardFn backward);

  /// Reverse sweep from `loss`. Each reached record runs once and is then
  /// consumed; leaf gradients accumulate across calls.
  void backprop(const Tensor& loss);

  /// The tape active on the calling thread, or nullptr.
  static Tape* current();

 private:
  friend class TapeScope;
  std::uint64_t id_;
  std::vector<Record> records_;
};

/// Activates a tape on the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Backprop on the tape currently active on this thread.
void backprop(const Tensor& loss);

/// Records a primitive application when any input requires a gradient and a
/// tape is active; otherwise returns the output untouched.
Tensor record_primitive(OpKind kind, const std::vector<Tensor>& inputs, Tensor output,
                        BackwardFn backward);

// ---------------------------------------------------------------------------
// Primitives

/// a[N, K] x b[K, M] -> [N, M]
Tensor matmul(const Tensor& a, const Tensor& b);
/// Adds the 1-D bias along `axis` (negative counts from the back).
Tensor bias_add(const Tensor& x, const Tensor& bias, int axis = -1);
/// x[B, C, H, W] * w[Co, C, k, k]. pad < 0 selects "same" padding k / 2.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, int pad = -1);
Tensor relu(const Tensor& x);
/// softmax(x / tau) along `axis`; tau is a scalar tensor and receives a gradient.
Tensor softmax(const Tensor& x, const Tensor& tau, int axis = -1);
Tensor softmax(const Tensor& x, double tau = 1.0, int axis = -1);
Tensor log_softmax(const Tensor& x, const Tensor& tau, int axis = -1);
Tensor log_softmax(const Tensor& x, double tau = 1.0, int axis = -1);
Tensor log(const Tensor& x);
/// x * log(x) with the limit 0 at x = 0.
Tensor xlogx(const Tensor& x);
/// Elementwise; either operand may be a single-element tensor (broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor shift(const Tensor& x, double offset);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Selects `index` along `axis`, dropping that axis.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t index);
/// x[B, C, ...] scaled by w[B, C] broadcast over the trailing axes.
Tensor channel_scale(const Tensor& x, const Tensor& w);
/// [B, C, H, W] -> [B, C]
Tensor global_avg_pool(const Tensor& x);
/// Non-overlapping window x window average pooling on [B, C, H, W].
Tensor avg_pool(const Tensor& x, std::size_t window);
/// Per leading-axis sample, x / sqrt(|x|^2 + 1e-12) over the flattened rest.
Tensor l2_normalize(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_last_axis(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// Identity forward; backward passes -factor * upstream.
Tensor grad_reverse(const Tensor& x, double factor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Verification

/// max_i |analytic_i - central_i| / max(1, |central_i|) for a scalar-valued f
/// evaluated at x. `x` is perturbed in place and restored.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                         double h = 1e-5);

}  // namespace cdkd::ad
