#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gau/errors.hpp"
#include "gau/rng.hpp"

namespace gau {

enum class DType : uint8_t { float32 = 0, float64 = 1 };

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::float32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::float64;
}

enum class Mode { train, eval };

using Shape = std::vector<size_t>;

size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Keeps freed tensor buffers in the heap instead of returning them to the OS,
// so each training step reuses warm pages. Call once at program start; a
// no-op outside glibc.
void configure_allocator();

// Tracks live tensor bytes (values and gradients) for the current thread.
// The benchmark reports `peak()` as its memory figure.
class MemoryTracker {
 public:
  static MemoryTracker& instance();

  void allocate(size_t bytes);
  void release(size_t bytes) noexcept;

  size_t current() const { return current_; }
  size_t peak() const { return peak_; }
  void reset_peak() { peak_ = current_; }
  // 0 disables the limit. Exceeding it throws OutOfMemoryError.
  void set_limit(size_t bytes) { limit_ = bytes; }
  size_t limit() const { return limit_; }

 private:
  size_t current_ = 0;
  size_t peak_ = 0;
  size_t limit_ = 0;
};

namespace detail {

template <class T>
struct Storage {
  Storage(Shape s, std::vector<T> values);
  ~Storage();
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  void ensure_grad();

  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using StoragePtr = std::shared_ptr<detail::Storage<T>>;

  Tensor() = default;
  explicit Tensor(StoragePtr storage) : storage_(std::move(storage)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  size_t rank() const { return storage_->shape.size(); }
  size_t dim(size_t axis) const;
  size_t size() const { return storage_->data.size(); }
  DType dtype() const { return dtype_of<T>(); }

  std::span<const T> data() const { return storage_->data; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<T> mutable_data() { return storage_->data; }

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool flag) { storage_->requires_grad = flag; }
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const T> grad() const { return storage_->grad; }
  std::span<T> mutable_grad();
  void zero_grad();

  T item() const;
  T at(size_t i) const { return storage_->data[i]; }
  T at(size_t row, size_t col) const;

  // New leaf holding a copy of the values.
  Tensor detach() const;
  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(storage_->data.begin(), storage_->data.end());
    return Tensor<U>::from(shape(), std::move(out), requires_grad());
  }

  const StoragePtr& storage() const { return storage_; }

 private:
  StoragePtr storage_;
};

// Ordered record of differentiable operations. Ops append themselves to the
// tape that is active on the calling thread (see TapeScope) whenever one of
// their inputs requires a gradient.
template <class T>
class Tape {
 public:
  using StoragePtr = typename Tensor<T>::StoragePtr;

  struct Entry {
    const char* name;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    std::function<void()> backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule once in
  // reverse order, accumulating into leaf gradients. Clears the tape.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<Entry> entries_;
};

template <class T>
Tape<T>* active_tape();

// Makes `tape` the active tape for this thread until destruction.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

// Helpers for writing ops outside ops.cpp.
template <class T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs);

template <class T>
Tensor<T> make_output(Shape shape, std::vector<T> values, bool requires_grad);

template <class T>
void record_op(const char* name, std::initializer_list<const Tensor<T>*> inputs,
               const Tensor<T>& output, std::function<void()> backward);

}  // namespace gau
