#include "terrai/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "terrai/common.hpp"

namespace terrai::autodiff {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Unfolds x into a (Cin·k·k) × (N·Hout·Wout) matrix, row index (ci, ky, kx).
std::vector<float> im2col(const Tensor4& x, std::size_t k, std::size_t pad, std::size_t hout, std::size_t wout) {
  const auto& s = x.shape();
  const std::size_t cols = s.n * hout * wout;
  std::vector<float> out(s.c * k * k * cols, 0.0f);
  for (std::size_t ci = 0; ci < s.c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        float* row = out.data() + ((ci * k + ky) * k + kx) * cols;
        for (std::size_t n = 0; n < s.n; ++n) {
          for (std::size_t y = 0; y < hout; ++y) {
            const long sy = static_cast<long>(y + ky) - static_cast<long>(pad);
            float* dst = row + (n * hout + y) * wout;
            if (sy < 0 || sy >= static_cast<long>(s.h)) continue;
            const float* src = x.raw() + ((n * s.c + ci) * s.h + static_cast<std::size_t>(sy)) * s.w;
            for (std::size_t xx = 0; xx < wout; ++xx) {
              const long sx = static_cast<long>(xx + kx) - static_cast<long>(pad);
              if (sx >= 0 && sx < static_cast<long>(s.w)) dst[xx] = src[sx];
            }
          }
        }
      }
    }
  }
  return out;
}

void col2im_add(const RowMatrix& dcols, Tensor4& dx, std::size_t k, std::size_t pad, std::size_t hout,
                std::size_t wout) {
  const auto& s = dx.shape();
  const std::size_t cols = s.n * hout * wout;
  for (std::size_t ci = 0; ci < s.c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const float* row = dcols.data() + ((ci * k + ky) * k + kx) * cols;
        for (std::size_t n = 0; n < s.n; ++n) {
          for (std::size_t y = 0; y < hout; ++y) {
            const long sy = static_cast<long>(y + ky) - static_cast<long>(pad);
            if (sy < 0 || sy >= static_cast<long>(s.h)) continue;
            const float* src = row + (n * hout + y) * wout;
            float* dst = dx.raw() + ((n * s.c + ci) * s.h + static_cast<std::size_t>(sy)) * s.w;
            for (std::size_t xx = 0; xx < wout; ++xx) {
              const long sx = static_cast<long>(xx + kx) - static_cast<long>(pad);
              if (sx >= 0 && sx < static_cast<long>(s.w)) dst[sx] += src[xx];
            }
          }
        }
      }
    }
  }
}

// NCHW tensor <-> C × (N·H·W) matrix.
RowMatrix channels_by_pixels(const Tensor4& t) {
  const auto& s = t.shape();
  const std::size_t hw = s.h * s.w;
  RowMatrix m(s.c, s.n * hw);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      std::memcpy(m.data() + c * s.n * hw + n * hw, t.raw() + (n * s.c + c) * hw, hw * sizeof(float));
    }
  }
  return m;
}

void scatter_channels_by_pixels(const RowMatrix& m, Tensor4& t) {
  const auto& s = t.shape();
  const std::size_t hw = s.h * s.w;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      std::memcpy(t.raw() + (n * s.c + c) * hw, m.data() + c * s.n * hw + n * hw, hw * sizeof(float));
    }
  }
}

void add_to(Tensor4& dst, const Tensor4& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + ")";
}

Tensor4::Tensor4(Shape shape, float fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor4::Tensor4(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("Tensor4: shape " + to_string(shape_) + " needs " + std::to_string(shape_.numel()) +
                     " values, got " + std::to_string(data_.size()));
  }
}

void Tensor4::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Parameter::Parameter(std::string name_, Shape shape) : name(std::move(name_)), value(shape), grad(shape) {}

Var Graph::push(Tensor4 value, std::function<void()> backward) {
  if (backward_done_) throw Error("graph already differentiated; record a new graph");
  nodes_.push_back(Node{std::move(value), Tensor4{}, record_ ? std::move(backward) : nullptr});
  return Var{nodes_.size() - 1};
}

Graph::Node& Graph::node(Var v) {
  if (v.id >= nodes_.size()) throw Error("invalid graph variable");
  return nodes_[v.id];
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw Error("invalid graph variable");
  return nodes_[v.id];
}

const Tensor4& Graph::value(Var v) const { return node(v).value; }

const Tensor4& Graph::grad(Var v) const {
  const auto& n = node(v);
  if (!backward_done_) throw Error("gradients are available only after backward()");
  return n.grad;
}

Var Graph::input(Tensor4 x) { return push(std::move(x), [] {}); }

Var Graph::conv2d(Var xv, Parameter& weights, Parameter& bias, std::size_t padding) {
  const Tensor4& x = value(xv);
  const auto xs = x.shape();
  const auto ws = weights.value.shape();
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square");
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: weights expect " + std::to_string(ws.c) + " input channels, got " +
                     std::to_string(xs.c));
  }
  if (bias.value.shape() != Shape{ws.n, 1, 1, 1}) throw ShapeError("conv2d: bias shape mismatch");
  const std::size_t k = ws.h;
  if (xs.h + 2 * padding < k || xs.w + 2 * padding < k) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t hout = xs.h + 2 * padding - k + 1;
  const std::size_t wout = xs.w + 2 * padding - k + 1;
  const std::size_t cout = ws.n;
  const std::size_t kdim = xs.c * k * k;
  const std::size_t ncols = xs.n * hout * wout;

  auto cols = std::make_shared<std::vector<float>>(im2col(x, k, padding, hout, wout));
  ConstMatrixMap w(weights.value.raw(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
  ConstMatrixMap colm(cols->data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(ncols));
  RowMatrix y = w * colm;
  for (std::size_t co = 0; co < cout; ++co) y.row(static_cast<Eigen::Index>(co)).array() += bias.value[co];
  Tensor4 out(Shape{xs.n, cout, hout, wout});
  scatter_channels_by_pixels(y, out);
  if (!record_) cols.reset();

  const std::size_t out_id = nodes_.size();
  const std::size_t in_id = xv.id;
  return push(std::move(out), [this, out_id, in_id, cols, &weights, &bias, k, padding, hout, wout, kdim, ncols,
                               cout] {
    const RowMatrix dy = channels_by_pixels(nodes_[out_id].grad);
    ConstMatrixMap colm(cols->data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(ncols));
    MatrixMap dw(weights.grad.raw(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
    dw.noalias() += dy * colm.transpose();
    for (std::size_t co = 0; co < cout; ++co) bias.grad[co] += dy.row(static_cast<Eigen::Index>(co)).sum();
    ConstMatrixMap w(weights.value.raw(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
    const RowMatrix dcols = w.transpose() * dy;
    col2im_add(dcols, nodes_[in_id].grad, k, padding, hout, wout);
  });
}

Var Graph::relu(Var xv) {
  const Tensor4& x = value(xv);
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  const std::size_t out_id = nodes_.size();
  const std::size_t in_id = xv.id;
  return push(std::move(out), [this, out_id, in_id] {
    const Tensor4& xin = nodes_[in_id].value;
    const Tensor4& g = nodes_[out_id].grad;
    Tensor4& dx = nodes_[in_id].grad;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xin[i] > 0.0f) dx[i] += g[i];
    }
  });
}

Var Graph::maxpool2(Var xv) {
  const Tensor4& x = value(xv);
  const auto s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2: spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is odd");
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor4 out(os);
  auto argmax = std::make_shared<std::vector<std::size_t>>(os.numel());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < os.h; ++y) {
        for (std::size_t xx = 0; xx < os.w; ++xx) {
          std::size_t best = ((n * s.c + c) * s.h + 2 * y) * s.w + 2 * xx;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((n * s.c + c) * s.h + 2 * y + dy) * s.w + 2 * xx + dx;
              if (x[idx] > x[best]) best = idx;
            }
          }
          const std::size_t o = ((n * os.c + c) * os.h + y) * os.w + xx;
          out[o] = x[best];
          (*argmax)[o] = best;
        }
      }
    }
  }
  const std::size_t out_id = nodes_.size();
  const std::size_t in_id = xv.id;
  return push(std::move(out), [this, out_id, in_id, argmax] {
    const Tensor4& g = nodes_[out_id].grad;
    Tensor4& dx = nodes_[in_id].grad;
    for (std::size_t o = 0; o < g.numel(); ++o) dx[(*argmax)[o]] += g[o];
  });
}

Var Graph::upsample2(Var xv, Parameter& weights, Parameter& bias) {
  const Tensor4& x = value(xv);
  const auto xs = x.shape();
  const auto ws = weights.value.shape();
  if (ws.n != xs.c || ws.h != 2 || ws.w != 2) {
    throw ShapeError("upsample2: weights " + to_string(ws) + " do not fit input " + to_string(xs));
  }
  const std::size_t cout = ws.c;
  if (bias.value.shape() != Shape{cout, 1, 1, 1}) throw ShapeError("upsample2: bias shape mismatch");
  const std::size_t cin = xs.c;
  const std::size_t npix = xs.n * xs.h * xs.w;
  const std::size_t taps = cout * 4;

  const RowMatrix xm = channels_by_pixels(x);  // Cin × npix
  ConstMatrixMap w(weights.value.raw(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(taps));
  const RowMatrix y = w.transpose() * xm;  // (Cout·4) × npix, row (co, a, b)
  const Shape os{xs.n, cout, xs.h * 2, xs.w * 2};
  Tensor4 out(os);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t a = 0; a < 2; ++a) {
      for (std::size_t b = 0; b < 2; ++b) {
        const float* row = y.data() + ((co * 2 + a) * 2 + b) * npix;
        for (std::size_t n = 0; n < xs.n; ++n) {
          for (std::size_t i = 0; i < xs.h; ++i) {
            for (std::size_t j = 0; j < xs.w; ++j) {
              out(n, co, 2 * i + a, 2 * j + b) = row[(n * xs.h + i) * xs.w + j] + bias.value[co];
            }
          }
        }
      }
    }
  }
  auto saved = std::make_shared<RowMatrix>(record_ ? xm : RowMatrix());
  const std::size_t out_id = nodes_.size();
  const std::size_t in_id = xv.id;
  return push(std::move(out), [this, out_id, in_id, saved, &weights, &bias, xs, cin, cout, npix, taps] {
    const Tensor4& g = nodes_[out_id].grad;
    RowMatrix dy(taps, npix);
    for (std::size_t co = 0; co < cout; ++co) {
      double bias_acc = 0.0;
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t b = 0; b < 2; ++b) {
          float* row = dy.data() + ((co * 2 + a) * 2 + b) * npix;
          for (std::size_t n = 0; n < xs.n; ++n) {
            for (std::size_t i = 0; i < xs.h; ++i) {
              for (std::size_t j = 0; j < xs.w; ++j) {
                const float v = g(n, co, 2 * i + a, 2 * j + b);
                row[(n * xs.h + i) * xs.w + j] = v;
                bias_acc += v;
              }
            }
          }
        }
      }
      bias.grad[co] += static_cast<float>(bias_acc);
    }
    MatrixMap dw(weights.grad.raw(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(taps));
    dw.noalias() += (*saved) * dy.transpose();
    ConstMatrixMap w(weights.value.raw(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(taps));
    const RowMatrix dx = w * dy;  // Cin × npix
    Tensor4 dxt(nodes_[in_id].value.shape());
    scatter_channels_by_pixels(dx, dxt);
    add_to(nodes_[in_id].grad, dxt);
  });
}

Var Graph::concat_channels(Var av, Var bv) {
  const Tensor4& a = value(av);
  const Tensor4& b = value(bv);
  const auto as = a.shape();
  const auto bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: " + to_string(as) + " and " + to_string(bs) + " differ in N/H/W");
  }
  const std::size_t hw = as.h * as.w;
  Tensor4 out(Shape{as.n, as.c + bs.c, as.h, as.w});
  for (std::size_t n = 0; n < as.n; ++n) {
    std::memcpy(out.raw() + n * (as.c + bs.c) * hw, a.raw() + n * as.c * hw, as.c * hw * sizeof(float));
    std::memcpy(out.raw() + (n * (as.c + bs.c) + as.c) * hw, b.raw() + n * bs.c * hw, bs.c * hw * sizeof(float));
  }
  const std::size_t out_id = nodes_.size();
  const std::size_t a_id = av.id;
  const std::size_t b_id = bv.id;
  return push(std::move(out), [this, out_id, a_id, b_id, as, bs, hw] {
    const Tensor4& g = nodes_[out_id].grad;
    Tensor4& da = nodes_[a_id].grad;
    Tensor4& db = nodes_[b_id].grad;
    for (std::size_t n = 0; n < as.n; ++n) {
      const float* src = g.raw() + n * (as.c + bs.c) * hw;
      float* pa = da.raw() + n * as.c * hw;
      for (std::size_t i = 0; i < as.c * hw; ++i) pa[i] += src[i];
      float* pb = db.raw() + n * bs.c * hw;
      for (std::size_t i = 0; i < bs.c * hw; ++i) pb[i] += src[as.c * hw + i];
    }
  });
}

Var Graph::sum(Var xv) {
  const Tensor4& x = value(xv);
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const std::size_t out_id = nodes_.size();
  const std::size_t in_id = xv.id;
  return push(Tensor4(Shape{1, 1, 1, 1}, static_cast<float>(acc)), [this, out_id, in_id] {
    const float g = nodes_[out_id].grad[0];
    for (auto& v : nodes_[in_id].grad.data()) v += g;
  });
}

void Graph::backward(Var output, const Tensor4& seed) {
  if (nodes_.empty()) throw Error("backward called before any forward operation");
  if (backward_done_) throw Error("backward called twice on the same graph");
  if (!record_) throw Error("backward on a graph recorded without gradients");
  if (output.id >= nodes_.size()) throw Error("invalid graph variable");
  if (seed.shape() != nodes_[output.id].value.shape()) {
    throw ShapeError("backward: seed shape " + to_string(seed.shape()) + " does not match output " +
                     to_string(nodes_[output.id].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor4(n.value.shape());
  nodes_[output.id].grad = seed;
  backward_done_ = true;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward();
  }
}

void Graph::backward(Var scalar_output, float seed) {
  const auto& v = value(scalar_output);
  if (v.numel() != 1) throw ShapeError("scalar backward on a non-scalar output " + to_string(v.shape()));
  backward(scalar_output, Tensor4(v.shape(), seed));
}

std::string save_parameters(std::span<const Parameter* const> params, const std::filesystem::path& stem) {
  std::vector<float> payload;
  nlohmann::json index = nlohmann::json::array();
  for (const Parameter* p : params) {
    const auto bytes = std::as_bytes(p->value.data());
    const auto s = p->value.shape();
    index.push_back({{"identifier", p->name},
                     {"shape", {s.n, s.c, s.h, s.w}},
                     {"byte_offset", payload.size() * sizeof(float)},
                     {"checksum", checksum_bytes(bytes)}});
    payload.insert(payload.end(), p->value.data().begin(), p->value.data().end());
  }
  static_assert(std::endian::native == std::endian::little, "parameter files are little-endian");
  const auto bin_path = std::filesystem::path(stem.string() + ".bin");
  {
    std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + bin_path.string());
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
  }
  const auto sum = checksum_bytes(std::as_bytes(std::span<const float>(payload)));
  nlohmann::json j;
  j["format"] = "terrai-params";
  j["version"] = 1;
  j["dtype"] = "float32le";
  j["checksum"] = sum;
  j["parameters"] = index;
  std::ofstream out(stem.string() + ".json", std::ios::trunc);
  if (!out) throw Error("cannot write " + stem.string() + ".json");
  out << j.dump(2) << '\n';
  return sum;
}

void load_parameters(std::span<Parameter* const> params, const std::filesystem::path& stem) {
  std::ifstream jin(stem.string() + ".json");
  if (!jin) throw DependencyError("missing parameter index " + stem.string() + ".json");
  nlohmann::json j;
  try {
    jin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IngestError(stem.string() + ".json: " + e.what());
  }
  const auto bin_path = std::filesystem::path(stem.string() + ".bin");
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw DependencyError("missing parameter payload " + bin_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (checksum_bytes(std::as_bytes(std::span<const char>(bytes))) != j.at("checksum").get<std::string>()) {
    throw DependencyError(bin_path.string() + ": checksum mismatch");
  }
  const auto& index = j.at("parameters");
  if (index.size() != params.size()) throw ShapeError("parameter count mismatch in " + stem.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    const auto& e = index[i];
    if (e.at("identifier").get<std::string>() != p.name) {
      throw ShapeError("parameter " + std::to_string(i) + " is '" + e.at("identifier").get<std::string>() +
                       "', expected '" + p.name + "'");
    }
    const auto dims = e.at("shape").get<std::vector<std::size_t>>();
    const Shape s{dims.at(0), dims.at(1), dims.at(2), dims.at(3)};
    if (s != p.value.shape()) throw ShapeError("parameter '" + p.name + "' has shape " + to_string(s));
    const auto offset = e.at("byte_offset").get<std::size_t>();
    const auto nbytes = s.numel() * sizeof(float);
    if (offset + nbytes > bytes.size()) throw IngestError(bin_path.string() + ": truncated");
    std::memcpy(p.value.raw(), bytes.data() + offset, nbytes);
  }
}

}  // namespace terrai::autodiff
