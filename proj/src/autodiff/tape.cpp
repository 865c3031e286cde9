#include <atomic>
#include <cmath>
#include <sstream>

#include "cdkd/autodiff.hpp"
#include "cdkd/errors.hpp"

namespace cdkd::ad {

namespace {

thread_local Tape* g_current_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
  }
  if (values.size() != numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor construction");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kBiasAdd: return "bias_add";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLog: return "log";
    case OpKind::kXLogX: return "xlogx";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kShift: return "shift";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kChannelScale: return "channel_scale";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kAvgPool: return "avg_pool";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumLastAxis: return "sum_last_axis";
    case OpKind::kReshape: return "reshape";
    case OpKind::kGradReverse: return "grad_reverse";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = ad::numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = ad::numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_node({1}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) throw ShapeError("axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }
std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}
std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw TapeError("requires_grad can only be changed on leaves");
  node_->requires_grad = on;
}
bool Tensor::is_leaf() const { return node_->record < 0; }
bool Tensor::grad_touched() const { return node_->grad_touched; }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  node_->grad_touched = false;
}

Tensor Tensor::detach() const {
  return Tensor(make_node(node_->shape, node_->value, false));
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

Tape* Tape::current() { return g_current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

Tensor Tape::append(OpKind kind, const std::vector<Tensor>& inputs, Tensor output,
                    BackwardFn backward) {
  Record rec{kind, {}, output.node(), std::move(backward), false};
  rec.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    const auto& n = in.node();
    if (n->record >= 0 && n->tape_id != id_) {
      throw TapeError(std::string(op_name(kind)) +
                      ": input was produced on a different tape; detach() it first");
    }
    rec.inputs.push_back(n);
  }
  output.node()->requires_grad = true;
  output.node()->tape_id = id_;
  output.node()->record = static_cast<std::int64_t>(records_.size());
  records_.push_back(std::move(rec));
  return output;
}

void Tape::backprop(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw TapeError("backprop: loss must be a scalar");
  }
  const auto& ln = loss.node();
  if (ln->tape_id != id_ || ln->record < 0) {
    throw TapeError("backprop: loss is not on the active tape");
  }
  const auto start = static_cast<std::size_t>(ln->record);
  if (records_[start].consumed) throw TapeError("backprop: tape already consumed");

  std::vector<char> reached(start + 1, 0);
  reached[start] = 1;
  ln->ensure_grad();
  ln->grad[0] += 1.0;
  ln->grad_touched = true;

  for (std::size_t i = start + 1; i-- > 0;) {
    if (!reached[i]) continue;
    Record& rec = records_[i];
    if (rec.consumed) throw TapeError("backprop: tape already consumed");
    rec.output->ensure_grad();
    for (const auto& in : rec.inputs) in->ensure_grad();
    rec.backward(rec.inputs, *rec.output);
    rec.consumed = true;
    for (const auto& in : rec.inputs) {
      if (!in->requires_grad) continue;
      in->grad_touched = true;
      if (in->record >= 0 && in->tape_id == id_) {
        reached[static_cast<std::size_t>(in->record)] = 1;
      } else {
        for (double g : in->grad) {
          if (!std::isfinite(g)) {
            throw NumericError(std::string("backprop: non-finite gradient through ") +
                               std::string(op_name(rec.kind)));
          }
        }
      }
    }
  }
}

void backprop(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw TapeError("backprop: no active tape");
  tape->backprop(loss);
}

Tensor record_primitive(OpKind kind, const std::vector<Tensor>& inputs, Tensor output,
                        BackwardFn backward) {
  for (double v : output.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name(kind)) + ": non-finite value produced in forward");
    }
  }
  Tape* tape = Tape::current();
  if (tape == nullptr) return output;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return output;
  return tape->append(kind, inputs, std::move(output), std::move(backward));
}

}  // namespace cdkd::ad
