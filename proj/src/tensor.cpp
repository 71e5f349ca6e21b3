#include "panet/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

namespace panet {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

std::uint64_t next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

enum class Broadcast { same, per_channel, per_sample_channel };

// Classifies how `b` lines up against `a`; throws on anything else.
Broadcast classify_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::same;
  if (a.size() == 4 && b.size() == 3 && b[0] == a[1] && b[1] == 1 && b[2] == 1) {
    return Broadcast::per_channel;
  }
  if (a.size() == 4 && b.size() == 4 && b[0] == a[0] && b[1] == a[1] && b[2] == 1 && b[3] == 1) {
    return Broadcast::per_sample_channel;
  }
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Index into b for flat index i of a.
struct BroadcastIndex {
  Broadcast kind;
  std::size_t plane = 1;     // H*W
  std::size_t channels = 1;  // C
  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Broadcast::same:
        return i;
      case Broadcast::per_channel:
        return (i / plane) % channels;
      case Broadcast::per_sample_channel:
        return i / plane;
    }
    return i;
  }
};

BroadcastIndex make_index(Broadcast kind, const Shape& a) {
  BroadcastIndex idx{kind};
  if (kind != Broadcast::same) {
    idx.plane = a[2] * a[3];
    idx.channels = a[1];
  }
  return idx;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node_ = std::move(node);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> data, const std::vector<Tensor>& inputs,
                             BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (const auto& in : inputs) out.node_->inputs.push_back(in.node_);
  out.node_->backward = std::move(backward);
  return out;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return node_ ? node_->data.size() : 0;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return node_ && !node_->backward;
}

template <typename T>
std::uint64_t Tensor<T>::id() const {
  return node_ ? node_->id : 0;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data() is only available on leaf tensors");
  return node_->data;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data, false);
}

template <typename T>
Tensor<T> Gradients<T>::of(const Tensor<T>& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) return Tensor<T>::zeros(param.shape());
  return it->second;
}

template <typename T>
Gradients<T> backward(const Tensor<T>& loss) {
  using Node = typename Tensor<T>::Node;
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  Gradients<T> result;
  if (!loss.requires_grad()) return result;

  // Post-order DFS gives inputs before consumers; walk it in reverse.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<T>> grads;
  grads[loss.node().get()] = std::vector<T>{T(1)};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (!node->backward) {
      result.insert(node->id, Tensor<T>(node->shape, std::move(found->second)));
      grads.erase(found);
      continue;
    }
    std::vector<std::vector<T>> grad_in(node->inputs.size());
    for (std::size_t k = 0; k < node->inputs.size(); ++k) {
      if (node->inputs[k]->requires_grad) grad_in[k].assign(node->inputs[k]->data.size(), T(0));
    }
    node->backward(found->second, grad_in);
    grads.erase(found);
    for (std::size_t k = 0; k < node->inputs.size(); ++k) {
      Node* in = node->inputs[k].get();
      if (!in->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(in);
      if (inserted) {
        slot->second = std::move(grad_in[k]);
      } else {
        for (std::size_t i = 0; i < slot->second.size(); ++i) slot->second[i] += grad_in[k][i];
      }
    }
  }
  return result;
}

template <typename T>
Tensor<T> ew_add(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = classify_broadcast(a.shape(), b.shape(), "ew_add");
  auto bi = make_index(kind, a.shape());
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[bi(i)];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b},
                            [bi](std::span<const T> g, std::vector<std::vector<T>>& gin) {
                              if (!gin[0].empty()) {
                                for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                              }
                              if (!gin[1].empty()) {
                                for (std::size_t i = 0; i < g.size(); ++i) gin[1][bi(i)] += g[i];
                              }
                            });
}

template <typename T>
Tensor<T> ew_sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = classify_broadcast(a.shape(), b.shape(), "ew_sub");
  auto bi = make_index(kind, a.shape());
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[bi(i)];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b},
                            [bi](std::span<const T> g, std::vector<std::vector<T>>& gin) {
                              if (!gin[0].empty()) {
                                for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                              }
                              if (!gin[1].empty()) {
                                for (std::size_t i = 0; i < g.size(); ++i) gin[1][bi(i)] -= g[i];
                              }
                            });
}

template <typename T>
Tensor<T> ew_mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = classify_broadcast(a.shape(), b.shape(), "ew_mul");
  auto bi = make_index(kind, a.shape());
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[bi(i)];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::from_op(
      a.shape(), std::move(out), {a, b},
      [bi, an, bn](std::span<const T> g, std::vector<std::vector<T>>& gin) {
        const auto& av = an->data;
        const auto& bv = bn->data;
        if (!gin[0].empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * bv[bi(i)];
        }
        if (!gin[1].empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) gin[1][bi(i)] += g[i] * av[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a},
                            [factor](std::span<const T> g, std::vector<std::vector<T>>& gin) {
                              for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
                            });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (auto v : a.data()) total += v;
  return Tensor<T>::from_op(Shape{1}, std::vector<T>{total}, {a},
                            [](std::span<const T> g, std::vector<std::vector<T>>& gin) {
                              for (auto& v : gin[0]) v += g[0];
                            });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), {a},
                            [](std::span<const T> g, std::vector<std::vector<T>>& gin) {
                              for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                            });
}

#define PANET_INSTANTIATE(T)                                              \
  template class Tensor<T>;                                               \
  template class Gradients<T>;                                            \
  template Gradients<T> backward(const Tensor<T>&);                       \
  template Tensor<T> ew_add(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> ew_sub(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> ew_mul(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> scale(const Tensor<T>&, T);                          \
  template Tensor<T> sum(const Tensor<T>&);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

PANET_INSTANTIATE(float)
PANET_INSTANTIATE(double)
PANET_INSTANTIATE(long double)

#undef PANET_INSTANTIATE

}  // namespace panet
