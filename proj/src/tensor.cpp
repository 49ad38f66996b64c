#include "gau/tensor.hpp"

#include <algorithm>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace gau {

void configure_allocator() {
#if defined(__GLIBC__)
  // Large vectors would otherwise be mmap'd and unmapped per op, paying a
  // page fault on every first touch.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc's upper limit
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}


size_t numel(const Shape& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

MemoryTracker& MemoryTracker::instance() {
  thread_local MemoryTracker tracker;
  return tracker;
}

void MemoryTracker::allocate(size_t bytes) {
  if (limit_ != 0 && current_ + bytes > limit_) {
    throw OutOfMemoryError("tensor allocation of " + std::to_string(bytes) +
                           " bytes exceeds tracked limit of " + std::to_string(limit_) +
                           " bytes (live " + std::to_string(current_) + ")");
  }
  current_ += bytes;
  peak_ = std::max(peak_, current_);
}

void MemoryTracker::release(size_t bytes) noexcept { current_ -= std::min(bytes, current_); }

namespace detail {

template <class T>
Storage<T>::Storage(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
  for (size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  MemoryTracker::instance().allocate(data.size() * sizeof(T));
}

template <class T>
Storage<T>::~Storage() {
  MemoryTracker::instance().release((data.size() + grad.size()) * sizeof(T));
}

template <class T>
void Storage<T>::ensure_grad() {
  if (grad.empty()) {
    MemoryTracker::instance().allocate(data.size() * sizeof(T));
    grad.assign(data.size(), T(0));
  }
}

template struct Storage<float>;
template struct Storage<double>;

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> values(numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  auto storage = std::make_shared<detail::Storage<T>>(std::move(shape), std::move(values));
  storage->requires_grad = requires_grad;
  return Tensor(std::move(storage));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
  return from(std::move(shape), std::move(values), requires_grad);
}

template <class T>
size_t Tensor<T>::dim(size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return shape()[axis];
}

template <class T>
std::span<T> Tensor<T>::mutable_grad() {
  storage_->ensure_grad();
  return storage_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
}

template <class T>
T Tensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  return storage_->data[0];
}

template <class T>
T Tensor<T>::at(size_t row, size_t col) const {
  return storage_->data[row * shape().back() + col];
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), storage_->data, false);
}

template class Tensor<float>;
template class Tensor<double>;

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw Error("backward: loss does not depend on any tensor requiring a gradient");
  }
  loss.storage()->ensure_grad();
  loss.storage()->grad[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // nothing flowed into this op
    it->backward();
  }
  entries_.clear();
}

template class Tape<float>;
template class Tape<double>;

namespace {
template <class T>
Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <class T>
Tape<T>* active_tape() {
  return active_tape_slot<T>();
}

template <class T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_tape_slot<T>()) {
  active_tape_slot<T>() = &tape;
}

template <class T>
TapeScope<T>::~TapeScope() {
  active_tape_slot<T>() = previous_;
}

template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template class TapeScope<float>;
template class TapeScope<double>;

template <class T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
}

template <class T>
Tensor<T> make_output(Shape shape, std::vector<T> values, bool requires_grad) {
  return Tensor<T>::from(std::move(shape), std::move(values), requires_grad);
}

template <class T>
void record_op(const char* name, std::initializer_list<const Tensor<T>*> inputs,
               const Tensor<T>& output, std::function<void()> backward) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return;
  typename Tape<T>::Entry entry{name, {}, output.storage(), std::move(backward)};
  for (const auto* t : inputs) entry.inputs.push_back(t->storage());
  tape->record(std::move(entry));
}

template bool needs_grad<float>(std::initializer_list<const Tensor<float>*>);
template bool needs_grad<double>(std::initializer_list<const Tensor<double>*>);
template Tensor<float> make_output<float>(Shape, std::vector<float>, bool);
template Tensor<double> make_output<double>(Shape, std::vector<double>, bool);
template void record_op<float>(const char*, std::initializer_list<const Tensor<float>*>,
                               const Tensor<float>&, std::function<void()>);
template void record_op<double>(const char*, std::initializer_list<const Tensor<double>*>,
                                const Tensor<double>&, std::function<void()>);

}  // namespace gau
