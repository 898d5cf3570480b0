#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace terrai::autodiff {

struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

/// Dense N×C×H×W float tensor, contiguous and row-major by (n, c, h, w).
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape shape, float fill = 0.0f);
  Tensor4(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }

  float& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  float operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  const float* raw() const { return data_.data(); }

  void fill(float v);
  bool operator==(const Tensor4&) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Trainable tensor with its accumulated gradient. Biases use shape {C,1,1,1}.
struct Parameter {
  std::string name;
  Tensor4 value;
  Tensor4 grad;

  Parameter() = default;
  Parameter(std::string name, Shape shape);

  void zero_grad() { grad.fill(0.0f); }
};

/// Handle to a node recorded in a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Tape of forward operations. Each op stores the activations its backward
/// pass needs; backward() replays the tape in exact reverse order and
/// accumulates into Parameter::grad. A graph supports one backward pass.
class Graph {
 public:
  /// With `record = false` no backward state is kept (inference).
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor4 x);

  /// Stride-1 cross-correlation with zero padding. weights: Cout×Cin×k×k.
  Var conv2d(Var x, Parameter& weights, Parameter& bias, std::size_t padding);
  Var relu(Var x);
  /// 2×2 max pooling, stride 2; ties go to the first element in row-major order.
  Var maxpool2(Var x);
  /// 2×2 stride-2 transposed convolution. weights: Cin×Cout×2×2.
  Var upsample2(Var x, Parameter& weights, Parameter& bias);
  Var concat_channels(Var a, Var b);
  /// Sum of all entries as a 1×1×1×1 tensor.
  Var sum(Var x);

  const Tensor4& value(Var v) const;
  /// Gradient of the seeded output with respect to `v`; valid after backward().
  const Tensor4& grad(Var v) const;

  void backward(Var output, const Tensor4& seed);
  void backward(Var scalar_output, float seed = 1.0f);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor4 value;
    Tensor4 grad;
    std::function<void()> backward;
  };

  Var push(Tensor4 value, std::function<void()> backward);
  Node& node(Var v);
  const Node& node(Var v) const;

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

/// Writes `<stem>.bin` (concatenated float32 little-endian values) and
/// `<stem>.json` (identifier, shape, byte offset, checksum per parameter).
/// Returns the checksum of the .bin payload.
std::string save_parameters(std::span<const Parameter* const> params, const std::filesystem::path& stem);

/// Loads values into `params`, which must match names and shapes.
void load_parameters(std::span<Parameter* const> params, const std::filesystem::path& stem);

}  // namespace terrai::autodiff
