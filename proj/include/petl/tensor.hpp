#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace petl {

using Shape = std::vector<std::size_t>;

// Error taxonomy. The CLI maps ConfigError/DimensionError to exit code 1 and
// NumericError to exit code 2.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless has_grad
  bool has_grad = false;
  bool requires_grad = false;
  std::uint64_t tape_id = 0;
  std::size_t node = kNoNode;
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copies share storage; use clone() for a
/// deep copy. Gradients are only ever allocated for tensors that require them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  explicit operator bool() const { return static_cast<bool>(impl_); }
  bool same_as(const Tensor& o) const { return impl_ == o.impl_; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t last_dim() const { return impl_->shape.empty() ? 1 : impl_->shape.back(); }
  std::size_t rows() const { return numel() / std::max<std::size_t>(last_dim(), 1); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) clear_grad();
  }

  bool has_grad() const { return impl_->has_grad; }
  std::span<const double> grad() const { return impl_->grad; }
  /// Mutable gradient buffer, zero-allocated on first access. Const because a
  /// Tensor is a handle: backward closures hold const copies of their inputs.
  std::span<double> grad_mut() const {
    if (!impl_->requires_grad)
      throw ContractError("gradient requested for a tensor that does not require grad");
    if (!impl_->has_grad) {
      impl_->grad.assign(impl_->data.size(), 0.0);
      impl_->has_grad = true;
    }
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_->has_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  void clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
    impl_->has_grad = false;
  }

  Tensor clone() const {
    return from(shape(), impl_->data, impl_->requires_grad);
  }
  /// Copy of the values with no gradient tracking.
  Tensor detach() const { return from(shape(), impl_->data, false); }

  std::uint64_t tape_id() const { return impl_->tape_id; }
  std::size_t tape_node() const { return impl_->node; }
  void bind_node(std::uint64_t tape, std::size_t node) {
    impl_->tape_id = tape;
    impl_->node = node;
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Append-only record of differentiable operations. Nodes are stored in
/// execution order, which is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tensor& out)>;

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view op, Tensor out, BackwardFn fn) {
    out.bind_node(id_, nodes_.size());
    nodes_.push_back(Node{op, std::move(out), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }
  std::string_view op_name(std::size_t i) const { return nodes_.at(i).op; }

  /// Reverse pass from a scalar loss recorded on this tape. Leaves receive
  /// accumulated gradients; each node's backward runs at most once.
  void backward(Tensor& loss) {
    if (!loss || loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got " +
                          (loss ? shape_str(loss.shape()) : std::string("null")));
    if (loss.tape_id() != id_ || loss.tape_node() >= nodes_.size())
      throw ContractError("loss was not recorded on this tape");
    if (consumed_) throw ContractError("tape already consumed by a backward pass");
    consumed_ = true;
    loss.grad_mut()[0] += 1.0;
    for (std::size_t i = loss.tape_node() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.out.has_grad()) continue;
      n.backward(n.out);
    }
  }

  /// Drops all nodes (and the activations they keep alive) and starts a new epoch.
  void clear() {
    nodes_.clear();
    consumed_ = false;
    id_ = next_id();
    ++epoch_;
  }

 private:
  struct Node {
    std::string_view op;
    Tensor out;
    BackwardFn backward;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::vector<Node> nodes_;
  std::uint64_t id_;
  std::uint64_t epoch_ = 0;
  bool consumed_ = false;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

/// Makes `tape` the recording target for the current thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &tape;
  }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope() { detail::active_tape_slot() = prev_; }

 private:
  Tape* prev_;
};

/// Disables recording on the current thread while alive.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
  ~NoGradScope() { detail::active_tape_slot() = prev_; }

 private:
  Tape* prev_;
};

/// Named parameters plus the set of ids that are currently trainable.
/// Buffers (e.g. batch-norm running statistics) live alongside but are never
/// parameters and never trainable.
class ParamStore {
 public:
  Tensor& add(const std::string& id, Tensor t) {
    if (entries_.contains(id) || buffers_.contains(id))
      throw ContractError("duplicate parameter id: " + id);
    t.set_requires_grad(false);
    return entries_.emplace(id, std::move(t)).first->second;
  }
  Tensor& add_buffer(const std::string& id, Tensor t) {
    if (entries_.contains(id) || buffers_.contains(id))
      throw ContractError("duplicate buffer id: " + id);
    t.set_requires_grad(false);
    return buffers_.emplace(id, std::move(t)).first->second;
  }

  bool contains(const std::string& id) const { return entries_.contains(id); }
  Tensor& at(const std::string& id) {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw ContractError("unknown parameter id: " + id);
    return it->second;
  }
  const Tensor& at(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw ContractError("unknown parameter id: " + id);
    return it->second;
  }
  Tensor& buffer(const std::string& id) {
    auto it = buffers_.find(id);
    if (it == buffers_.end()) throw ContractError("unknown buffer id: " + id);
    return it->second;
  }

  void set_trainable(const std::string& id, bool on) {
    at(id).set_requires_grad(on);
    if (on)
      trainable_.insert(id);
    else
      trainable_.erase(id);
  }
  bool is_trainable(const std::string& id) const { return trainable_.contains(id); }
  void freeze_everything() {
    for (auto& [id, t] : entries_) t.set_requires_grad(false);
    trainable_.clear();
  }

  const std::map<std::string, Tensor>& entries() const { return entries_; }
  std::map<std::string, Tensor>& entries() { return entries_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }
  const std::set<std::string>& trainable_ids() const { return trainable_; }

  std::size_t count_total() const {
    std::size_t n = 0;
    for (const auto& [id, t] : entries_) n += t.numel();
    return n;
  }
  std::size_t count_trainable() const {
    std::size_t n = 0;
    for (const auto& id : trainable_) n += entries_.at(id).numel();
    return n;
  }

  void zero_grad() {
    for (auto& [id, t] : entries_) t.zero_grad();
  }

 private:
  std::map<std::string, Tensor> entries_;
  std::map<std::string, Tensor> buffers_;
  std::set<std::string> trainable_;
};

}  // namespace petl
