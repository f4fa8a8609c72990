#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace gmc::ad {

/// Per-thread numeric diagnostics (tapes are thread-confined).
struct Diagnostics {
  long kabsch_clamped = 0;
  long sinkhorn_fallback_rows = 0;
  void reset() { *this = Diagnostics{}; }
};

inline Diagnostics& diagnostics() {
  thread_local Diagnostics d;
  return d;
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One tape entry: a 2D value block plus everything reverse mode needs.
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;  // row-major
  std::vector<double> grad;   // empty until touched
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  std::size_t size() const { return rows * cols; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

/// Value-semantics handle onto the tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
    if (values.size() != rows * cols)
      throw std::invalid_argument("Tensor: value count does not match shape");
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    return Tensor(n);
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return constant(rows, cols, std::vector<double>(rows * cols, 0.0));
  }

  static Tensor full(std::size_t rows, std::size_t cols, double v) {
    return constant(rows, cols, std::vector<double>(rows * cols, v));
  }

  static Tensor scalar(double v) { return constant(1, 1, {v}); }

  static Tensor param(std::size_t rows, std::size_t cols, std::vector<double> values) {
    Tensor t = constant(rows, cols, std::move(values));
    t.node_->requires_grad = true;
    t.node_->ensure_grad();
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& mutable_values() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: not a scalar");
    return node_->value[0];
  }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

inline std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
}

inline Tensor make_op(std::size_t rows, std::size_t cols,
                      std::vector<Tensor> parents,
                      std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.resize(rows * cols);
  bool needs = false;
  for (const Tensor& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const Tensor& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor(n);
}

// raw row-major matrix products, accumulating into out
inline void mm_nn(const double* a, const double* b, double* out, std::size_t n,
                  std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

inline void mm_nt(const double* a, const double* b, double* out, std::size_t n,
                  std::size_t k, std::size_t m) {
  // out[n x m] += a[n x k] * b[m x k]^T
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    double* orow = out + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] += acc;
    }
  }
}

inline void mm_tn(const double* a, const double* b, double* out, std::size_t n,
                  std::size_t k, std::size_t m) {
  // out[k x m] += a[n x k]^T * b[n x m]
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* orow = out + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, b}, [an = a.node(), bn = b.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.values()[i] + b.values()[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, b}, [an = a.node(), bn = b.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.values()[i] - b.values()[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, b}, [an = a.node(), bn = b.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.values()[i] * b.values()[i];
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, b}, [an = a.node(), bn = b.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.values()[i] / b.values()[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_op(a.rows(), a.cols(), {a}, [an = a.node(), c](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += c * self.grad[i];
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.mutable_values()[i] = c * a.values()[i];
  return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  Tensor out = detail::make_op(a.rows(), a.cols(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  return out;
}

inline Tensor exp(const Tensor& a) {
  Tensor out = detail::make_op(a.rows(), a.cols(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * self.value[i];
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = std::exp(a.values()[i]);
  return out;
}

inline Tensor abs(const Tensor& a) {
  Tensor out = detail::make_op(a.rows(), a.cols(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double s = an->value[i] > 0.0 ? 1.0 : (an->value[i] < 0.0 ? -1.0 : 0.0);
      an->grad[i] += self.grad[i] * s;
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = std::abs(a.values()[i]);
  return out;
}

inline Tensor square(const Tensor& a) {
  Tensor out = detail::make_op(a.rows(), a.cols(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * 2.0 * an->value[i];
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.values()[i] * a.values()[i];
  return out;
}

inline Tensor sqrt(const Tensor& a) {
  Tensor out = detail::make_op(a.rows(), a.cols(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * 0.5 / std::max(self.value[i], 1e-300);
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = std::sqrt(a.values()[i]);
  return out;
}

// ---------------------------------------------------------------------------
// broadcast over the leading dimension

inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != a.cols())
    throw std::invalid_argument("add_rowvec: shape mismatch " + detail::shape_str(a) +
                                " vs " + detail::shape_str(v));
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, v}, [an = a.node(), vn = v.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t c = 0; c < self.cols; ++c)
          vn->grad[c] += self.grad[r * self.cols + c];
    }
  });
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c)
      out.mutable_values()[r * a.cols() + c] = a.values()[r * a.cols() + c] + v.values()[c];
  return out;
}

inline Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != a.cols())
    throw std::invalid_argument("mul_rowvec: shape mismatch " + detail::shape_str(a) +
                                " vs " + detail::shape_str(v));
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, v}, [an = a.node(), vn = v.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t c = 0; c < self.cols; ++c)
          an->grad[r * self.cols + c] += self.grad[r * self.cols + c] * vn->value[c];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t c = 0; c < self.cols; ++c)
          vn->grad[c] += self.grad[r * self.cols + c] * an->value[r * self.cols + c];
    }
  });
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c)
      out.mutable_values()[r * a.cols() + c] = a.values()[r * a.cols() + c] * v.values()[c];
  return out;
}

inline Tensor add_colvec(const Tensor& a, const Tensor& v) {
  if (v.cols() != 1 || v.rows() != a.rows())
    throw std::invalid_argument("add_colvec: shape mismatch " + detail::shape_str(a) +
                                " vs " + detail::shape_str(v));
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, v}, [an = a.node(), vn = v.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t c = 0; c < self.cols; ++c) vn->grad[r] += self.grad[r * self.cols + c];
    }
  });
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c)
      out.mutable_values()[r * a.cols() + c] = a.values()[r * a.cols() + c] + v.values()[r];
  return out;
}

inline Tensor mul_colvec(const Tensor& a, const Tensor& v) {
  if (v.cols() != 1 || v.rows() != a.rows())
    throw std::invalid_argument("mul_colvec: shape mismatch " + detail::shape_str(a) +
                                " vs " + detail::shape_str(v));
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, v}, [an = a.node(), vn = v.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t c = 0; c < self.cols; ++c)
          an->grad[r * self.cols + c] += self.grad[r * self.cols + c] * vn->value[r];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t c = 0; c < self.cols; ++c)
          vn->grad[r] += self.grad[r * self.cols + c] * an->value[r * self.cols + c];
    }
  });
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c)
      out.mutable_values()[r * a.cols() + c] = a.values()[r * a.cols() + c] * v.values()[r];
  return out;
}

inline Tensor div_colvec(const Tensor& a, const Tensor& v) {
  if (v.cols() != 1 || v.rows() != a.rows())
    throw std::invalid_argument("div_colvec: shape mismatch " + detail::shape_str(a) +
                                " vs " + detail::shape_str(v));
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, v}, [an = a.node(), vn = v.node()](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t c = 0; c < self.cols; ++c)
          an->grad[r * self.cols + c] += self.grad[r * self.cols + c] / vn->value[r];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < self.rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < self.cols; ++c)
          acc += self.grad[r * self.cols + c] * an->value[r * self.cols + c];
        vn->grad[r] -= acc / (vn->value[r] * vn->value[r]);
      }
    }
  });
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c)
      out.mutable_values()[r * a.cols() + c] = a.values()[r * a.cols() + c] / v.values()[r];
  return out;
}

inline Tensor broadcast_rows(const Tensor& v, std::size_t n) {
  if (v.rows() != 1) throw std::invalid_argument("broadcast_rows: input must be 1 x C");
  Tensor out = detail::make_op(n, v.cols(), {v}, [vn = v.node()](Node& self) {
    vn->ensure_grad();
    for (std::size_t r = 0; r < self.rows; ++r)
      for (std::size_t c = 0; c < self.cols; ++c) vn->grad[c] += self.grad[r * self.cols + c];
  });
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < v.cols(); ++c)
      out.mutable_values()[r * v.cols() + c] = v.values()[c];
  return out;
}

// ---------------------------------------------------------------------------
// matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: shape mismatch " + detail::shape_str(a) + " vs " +
                                detail::shape_str(b));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = detail::make_op(n, m, {a, b}, [an = a.node(), bn = b.node(), n, k, m](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nt(self.grad.data(), bn->value.data(), an->grad.data(), n, m, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn(an->value.data(), self.grad.data(), bn->grad.data(), n, k, m);
    }
  });
  std::fill(out.mutable_values().begin(), out.mutable_values().end(), 0.0);
  detail::mm_nn(a.values().data(), b.values().data(), out.mutable_values().data(), n, k, m);
  return out;
}

/// a * b^T for row-major blocks of matching inner dimension.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: shape mismatch " + detail::shape_str(a) +
                                " vs " + detail::shape_str(b));
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor out = detail::make_op(n, m, {a, b}, [an = a.node(), bn = b.node(), n, k, m](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nn(self.grad.data(), bn->value.data(), an->grad.data(), n, m, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn(self.grad.data(), an->value.data(), bn->grad.data(), n, m, k);
    }
  });
  std::fill(out.mutable_values().begin(), out.mutable_values().end(), 0.0);
  detail::mm_nt(a.values().data(), b.values().data(), out.mutable_values().data(), n, k, m);
  return out;
}

/// a^T * b.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw std::invalid_argument("matmul_tn: shape mismatch " + detail::shape_str(a) +
                                " vs " + detail::shape_str(b));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = detail::make_op(k, m, {a, b}, [an = a.node(), bn = b.node(), n, k, m](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nt(bn->value.data(), self.grad.data(), an->grad.data(), n, m, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_nn(an->value.data(), self.grad.data(), bn->grad.data(), n, k, m);
    }
  });
  std::fill(out.mutable_values().begin(), out.mutable_values().end(), 0.0);
  detail::mm_tn(a.values().data(), b.values().data(), out.mutable_values().data(), n, k, m);
  return out;
}

// ---------------------------------------------------------------------------
// shape / indexing

inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> idx) {
  for (std::size_t i : idx)
    if (i >= a.rows()) throw std::invalid_argument("gather_rows: index out of range");
  const std::size_t c = a.cols();
  Tensor out = detail::make_op(idx.size(), c, {a}, [an = a.node(), idx, c](Node& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < c; ++j)
        an->grad[idx[r] * c + j] += self.grad[r * c + j];  // scatter-add
  });
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < c; ++j)
      out.mutable_values()[r * c + j] = a.values()[idx[r] * c + j];
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  std::size_t rows = parts[0].rows(), cols = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  std::vector<NodePtr> pn;
  std::vector<std::size_t> offs;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    pn.push_back(p.node());
    offs.push_back(off);
    off += p.cols();
  }
  Tensor out = detail::make_op(rows, cols, parts, [pn, offs, cols](Node& self) {
    for (std::size_t k = 0; k < pn.size(); ++k) {
      if (!pn[k]->requires_grad) continue;
      pn[k]->ensure_grad();
      const std::size_t pc = pn[k]->cols;
      for (std::size_t r = 0; r < self.rows; ++r)
        for (std::size_t j = 0; j < pc; ++j)
          pn[k]->grad[r * pc + j] += self.grad[r * cols + offs[k] + j];
    }
  });
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t pc = parts[k].cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < pc; ++j)
        out.mutable_values()[r * cols + offs[k] + j] = parts[k].values()[r * pc + j];
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  std::size_t cols = parts[0].cols(), rows = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  std::vector<NodePtr> pn;
  std::vector<std::size_t> offs;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    pn.push_back(p.node());
    offs.push_back(off);
    off += p.rows();
  }
  Tensor out = detail::make_op(rows, cols, parts, [pn, offs, cols](Node& self) {
    for (std::size_t k = 0; k < pn.size(); ++k) {
      if (!pn[k]->requires_grad) continue;
      pn[k]->ensure_grad();
      for (std::size_t i = 0; i < pn[k]->size(); ++i)
        pn[k]->grad[i] += self.grad[offs[k] * cols + i];
    }
  });
  for (std::size_t k = 0; k < parts.size(); ++k)
    std::copy(parts[k].values().begin(), parts[k].values().end(),
              out.mutable_values().begin() + static_cast<std::ptrdiff_t>(offs[k] * cols));
  return out;
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = detail::make_op(c, r, {a}, [an = a.node(), r, c](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[j * r + i];
  });
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.mutable_values()[j * r + i] = a.values()[i * c + j];
  return out;
}

/// Divide everything by a 1x1 tensor.
inline Tensor div_by_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw std::invalid_argument("div_by_scalar: divisor must be 1x1");
  Tensor out = detail::make_op(a.rows(), a.cols(), {a, s}, [an = a.node(), sn = s.node()](Node& self) {
    const double sv = sn->value[0];
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / sv;
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
      sn->grad[0] -= acc / (sv * sv);
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.values()[i] / s.values()[0];
  return out;
}

/// Block-repeat columns: output column j reads input column j / times.
/// Used to share grouped attention weights across channel groups.
inline Tensor repeat_cols(const Tensor& a, std::size_t times) {
  if (times == 0) throw std::invalid_argument("repeat_cols: times must be positive");
  const std::size_t ic = a.cols(), oc = ic * times;
  Tensor out = detail::make_op(a.rows(), oc, {a}, [an = a.node(), times, ic, oc](Node& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < self.rows; ++r)
      for (std::size_t j = 0; j < oc; ++j)
        an->grad[r * ic + j / times] += self.grad[r * oc + j];
  });
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t j = 0; j < oc; ++j)
      out.mutable_values()[r * oc + j] = a.values()[r * ic + j / times];
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > a.rows()) throw std::invalid_argument("slice_rows: bad range");
  const std::size_t c = a.cols();
  Tensor out = detail::make_op(r1 - r0, c, {a}, [an = a.node(), r0, c](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[r0 * c + i] += self.grad[i];
  });
  std::copy(a.values().begin() + static_cast<std::ptrdiff_t>(r0 * c),
            a.values().begin() + static_cast<std::ptrdiff_t>(r1 * c),
            out.mutable_values().begin());
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > a.cols()) throw std::invalid_argument("slice_cols: bad range");
  const std::size_t c = a.cols(), w = c1 - c0;
  Tensor out = detail::make_op(a.rows(), w, {a}, [an = a.node(), c0, c, w](Node& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < self.rows; ++r)
      for (std::size_t j = 0; j < w; ++j)
        an->grad[r * c + c0 + j] += self.grad[r * w + j];
  });
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t j = 0; j < w; ++j)
      out.mutable_values()[r * w + j] = a.values()[r * c + c0 + j];
  return out;
}

// ---------------------------------------------------------------------------
// reductions and normalizations

inline Tensor row_sums(const Tensor& a) {
  Tensor out = detail::make_op(a.rows(), 1, {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < an->rows; ++r)
      for (std::size_t c = 0; c < an->cols; ++c) an->grad[r * an->cols + c] += self.grad[r];
  });
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) acc += a.values()[r * a.cols() + c];
    out.mutable_values()[r] = acc;
  }
  return out;
}

inline Tensor col_sums(const Tensor& a) {
  Tensor out = detail::make_op(1, a.cols(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < an->rows; ++r)
      for (std::size_t c = 0; c < an->cols; ++c) an->grad[r * an->cols + c] += self.grad[c];
  });
  std::fill(out.mutable_values().begin(), out.mutable_values().end(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out.mutable_values()[c] += a.values()[r * a.cols() + c];
  return out;
}

inline Tensor reduce_sum(const Tensor& a) {
  Tensor out = detail::make_op(1, 1, {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < an->size(); ++i) an->grad[i] += self.grad[0];
  });
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  out.mutable_values()[0] = acc;
  return out;
}

inline Tensor reduce_mean(const Tensor& a) {
  return scale(reduce_sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor reduce_max(const Tensor& a) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a.values()[i] > a.values()[arg]) arg = i;
  Tensor out = detail::make_op(1, 1, {a}, [an = a.node(), arg](Node& self) {
    an->ensure_grad();
    an->grad[arg] += self.grad[0];
  });
  out.mutable_values()[0] = a.values()[arg];
  return out;
}

inline Tensor softmax_lastdim(const Tensor& a) {
  Tensor out = detail::make_op(a.rows(), a.cols(), {a}, [an = a.node()](Node& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < self.rows; ++r) {
      const double* y = &self.value[r * self.cols];
      const double* g = &self.grad[r * self.cols];
      double dot = 0.0;
      for (std::size_t c = 0; c < self.cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < self.cols; ++c)
        an->grad[r * self.cols + c] += y[c] * (g[c] - dot);
    }
  });
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* x = &a.values()[r * a.cols()];
    double mx = x[0];
    for (std::size_t c = 1; c < a.cols(); ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      double e = std::exp(x[c] - mx);
      out.mutable_values()[r * a.cols() + c] = e;
      sum += e;
    }
    for (std::size_t c = 0; c < a.cols(); ++c) out.mutable_values()[r * a.cols() + c] /= sum;
  }
  return out;
}

/// Softmax down each column within consecutive blocks of k rows.
/// Input rows must be edge-major: block b holds rows [b*k, (b+1)*k).
inline Tensor softmax_over_neighbors(const Tensor& a, std::size_t k) {
  if (k == 0 || a.rows() % k != 0)
    throw std::invalid_argument("softmax_over_neighbors: rows not divisible by k");
  const std::size_t cols = a.cols(), blocks = a.rows() / k;
  Tensor out = detail::make_op(a.rows(), cols, {a}, [an = a.node(), k, cols, blocks](Node& self) {
    an->ensure_grad();
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t c = 0; c < cols; ++c) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          std::size_t i = (b * k + j) * cols + c;
          dot += self.grad[i] * self.value[i];
        }
        for (std::size_t j = 0; j < k; ++j) {
          std::size_t i = (b * k + j) * cols + c;
          an->grad[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
  });
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t c = 0; c < cols; ++c) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j)
        mx = std::max(mx, a.values()[(b * k + j) * cols + c]);
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        std::size_t i = (b * k + j) * cols + c;
        double e = std::exp(a.values()[i] - mx);
        out.mutable_values()[i] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < k; ++j) out.mutable_values()[(b * k + j) * cols + c] /= sum;
    }
  return out;
}

/// Sum each consecutive block of k rows into one output row.
inline Tensor sum_neighbors(const Tensor& a, std::size_t k) {
  if (k == 0 || a.rows() % k != 0)
    throw std::invalid_argument("sum_neighbors: rows not divisible by k");
  const std::size_t cols = a.cols(), blocks = a.rows() / k;
  Tensor out = detail::make_op(blocks, cols, {a}, [an = a.node(), k, cols, blocks](Node& self) {
    an->ensure_grad();
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t c = 0; c < cols; ++c)
          an->grad[(b * k + j) * cols + c] += self.grad[b * cols + c];
  });
  std::fill(out.mutable_values().begin(), out.mutable_values().end(), 0.0);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < cols; ++c)
        out.mutable_values()[b * cols + c] += a.values()[(b * k + j) * cols + c];
  return out;
}

/// Row-wise standardization: (x - mean) / sqrt(var + eps).
inline Tensor layer_norm(const Tensor& a, double eps = 1e-8) {
  const std::size_t cols = a.cols();
  auto n = std::make_shared<std::vector<double>>(a.rows());  // 1/sigma per row
  Tensor out = detail::make_op(a.rows(), cols, {a}, [an = a.node(), n, cols](Node& self) {
    an->ensure_grad();
    const double inv_c = 1.0 / static_cast<double>(cols);
    for (std::size_t r = 0; r < self.rows; ++r) {
      const double* y = &self.value[r * cols];
      const double* g = &self.grad[r * cols];
      double gmean = 0.0, gydot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        gmean += g[c];
        gydot += g[c] * y[c];
      }
      gmean *= inv_c;
      gydot *= inv_c;
      const double inv_sigma = (*n)[r];
      for (std::size_t c = 0; c < cols; ++c)
        an->grad[r * cols + c] += inv_sigma * (g[c] - gmean - y[c] * gydot);
    }
  });
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* x = &a.values()[r * cols];
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += x[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= static_cast<double>(cols);
    double inv_sigma = 1.0 / std::sqrt(var + eps);
    (*n)[r] = inv_sigma;
    for (std::size_t c = 0; c < cols; ++c)
      out.mutable_values()[r * cols + c] = (x[c] - mean) * inv_sigma;
  }
  return out;
}

/// Divide every row (optionally excluding the last) by its sum. Zero-sum rows
/// fall back to a uniform row with a diagnostic and pass no gradient.
inline Tensor row_normalize(const Tensor& a, bool skip_last_row) {
  const std::size_t rows = a.rows(), cols = a.cols();
  const std::size_t limit = skip_last_row ? rows - 1 : rows;
  auto sums = std::make_shared<std::vector<double>>(rows, 1.0);
  Tensor out = detail::make_op(rows, cols, {a}, [an = a.node(), sums, limit, cols](Node& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < self.rows; ++r) {
      if (r >= limit) {  // untouched rows pass gradient through
        for (std::size_t c = 0; c < cols; ++c)
          an->grad[r * cols + c] += self.grad[r * cols + c];
        continue;
      }
      double s = (*sums)[r];
      if (s <= 0.0) continue;  // fallback row: no gradient
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c)
        acc += self.grad[r * cols + c] * self.value[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        an->grad[r * cols + c] += (self.grad[r * cols + c] - acc) / s;
    }
  });
  for (std::size_t r = 0; r < rows; ++r) {
    if (r >= limit) {
      for (std::size_t c = 0; c < cols; ++c)
        out.mutable_values()[r * cols + c] = a.values()[r * cols + c];
      continue;
    }
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += a.values()[r * cols + c];
    (*sums)[r] = s;
    if (s <= 0.0) {
      diagnostics().sinkhorn_fallback_rows++;
      for (std::size_t c = 0; c < cols; ++c)
        out.mutable_values()[r * cols + c] = 1.0 / static_cast<double>(cols);
    } else {
      for (std::size_t c = 0; c < cols; ++c)
        out.mutable_values()[r * cols + c] = a.values()[r * cols + c] / s;
    }
  }
  return out;
}

/// Column counterpart of row_normalize.
inline Tensor col_normalize(const Tensor& a, bool skip_last_col) {
  const std::size_t rows = a.rows(), cols = a.cols();
  const std::size_t limit = skip_last_col ? cols - 1 : cols;
  auto sums = std::make_shared<std::vector<double>>(cols, 1.0);
  Tensor out = detail::make_op(rows, cols, {a}, [an = a.node(), sums, limit, rows, cols](Node& self) {
    an->ensure_grad();
    for (std::size_t c = 0; c < cols; ++c) {
      if (c >= limit) {
        for (std::size_t r = 0; r < rows; ++r)
          an->grad[r * cols + c] += self.grad[r * cols + c];
        continue;
      }
      double s = (*sums)[c];
      if (s <= 0.0) continue;
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r)
        acc += self.grad[r * cols + c] * self.value[r * cols + c];
      for (std::size_t r = 0; r < rows; ++r)
        an->grad[r * cols + c] += (self.grad[r * cols + c] - acc) / s;
    }
  });
  for (std::size_t c = 0; c < cols; ++c) {
    if (c >= limit) {
      for (std::size_t r = 0; r < rows; ++r)
        out.mutable_values()[r * cols + c] = a.values()[r * cols + c];
      continue;
    }
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += a.values()[r * cols + c];
    (*sums)[c] = s;
    if (s <= 0.0) {
      diagnostics().sinkhorn_fallback_rows++;
      for (std::size_t r = 0; r < rows; ++r)
        out.mutable_values()[r * cols + c] = 1.0 / static_cast<double>(rows);
    } else {
      for (std::size_t r = 0; r < rows; ++r)
        out.mutable_values()[r * cols + c] = a.values()[r * cols + c] / s;
    }
  }
  return out;
}

/// Orthogonal-Procrustes solve from a 3x3 cross-covariance: R maps source
/// directions onto target directions, det(R) = +1. Backward uses the SVD
/// gradient with near-degenerate spectra clamped.
inline Tensor kabsch(const Tensor& h) {
  if (h.rows() != 3 || h.cols() != 3)
    throw std::invalid_argument("kabsch: expected 3x3, got " + detail::shape_str(h));
  using M3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
  M3 hm;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) hm(r, c) = h.values()[static_cast<std::size_t>(r * 3 + c)];
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(hm, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  Eigen::Vector3d s = svd.singularValues();
  double sign = (v * u.transpose()).determinant() >= 0.0 ? 1.0 : -1.0;
  Eigen::Vector3d dvec(1.0, 1.0, sign);
  Eigen::Matrix3d r = v * dvec.asDiagonal() * u.transpose();

  Tensor out = detail::make_op(3, 3, {h}, [hn = h.node(), u, v, s, dvec](Node& self) {
    Eigen::Matrix3d g;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) g(i, j) = self.grad[static_cast<std::size_t>(i * 3 + j)];
    // dL/dU and dL/dV for R = V * D * U^T with D treated as constant
    Eigen::Matrix3d gu = g.transpose() * v * dvec.asDiagonal();
    Eigen::Matrix3d gv = g * u * dvec.asDiagonal();
    Eigen::Matrix3d a = u.transpose() * gu;
    Eigen::Matrix3d b = v.transpose() * gv;
    Eigen::Matrix3d f = Eigen::Matrix3d::Zero();
    bool clamped = false;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        if (i == j) continue;
        double denom = s[j] * s[j] - s[i] * s[i];
        if (std::abs(denom) < 1e-6) {
          denom = denom >= 0.0 ? 1e-6 : -1e-6;
          clamped = true;
        }
        f(i, j) = 1.0 / denom;
      }
    if (clamped) diagnostics().kabsch_clamped++;
    Eigen::Matrix3d sdiag = s.asDiagonal();
    Eigen::Matrix3d inner = f.cwiseProduct(a - a.transpose()) * sdiag +
                            sdiag * f.cwiseProduct(b - b.transpose());
    Eigen::Matrix3d dh = u * inner * v.transpose();
    hn->ensure_grad();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) hn->grad[static_cast<std::size_t>(i * 3 + j)] += dh(i, j);
  });
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.mutable_values()[static_cast<std::size_t>(i * 3 + j)] = r(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// reverse pass

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!loss.requires_grad()) return;  // nothing reachable

  // iterative post-order DFS over parents
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    node->ensure_grad();
    node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// parameters, Adam, checkpoints

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}

  /// Kaiming-style fan-in uniform init, bound sqrt(6 / rows).
  Tensor create(const std::string& name, std::size_t rows, std::size_t cols) {
    double bound = std::sqrt(6.0 / static_cast<double>(rows));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> vals(rows * cols);
    for (double& v : vals) v = u(rng_);
    return insert(name, Tensor::param(rows, cols, std::move(vals)));
  }

  Tensor create_zeros(const std::string& name, std::size_t rows, std::size_t cols) {
    return insert(name, Tensor::param(rows, cols, std::vector<double>(rows * cols, 0.0)));
  }

  Tensor create_full(const std::string& name, std::size_t rows, std::size_t cols, double v) {
    return insert(name, Tensor::param(rows, cols, std::vector<double>(rows * cols, v)));
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.node()->grad.assign(t.size(), 0.0);
  }

  void scale_grads(double c) {
    for (auto& [name, t] : params_)
      for (double& g : t.node()->grad) g *= c;
  }

  bool all_finite() const {
    for (const auto& [name, t] : params_)
      for (double v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
  }

  const std::map<std::string, Tensor>& map() const { return params_; }
  std::uint64_t seed() const { return seed_; }

  /// Overwrite values of an existing parameter (testing / identity setups).
  void set_values(const std::string& name, const std::vector<double>& vals) {
    Tensor t = get(name);
    if (vals.size() != t.size())
      throw std::invalid_argument("ParamStore::set_values: size mismatch for " + name);
    t.mutable_values() = vals;
  }

 private:
  Tensor insert(const std::string& name, Tensor t) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    params_.emplace(name, t);
    return t;
  }

  std::map<std::string, Tensor> params_;  // ordered for deterministic walks
  std::uint64_t seed_;
  std::mt19937_64 rng_;
};

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update from the gradients held in the store.
inline void adam_step(ParamStore& store, AdamState& state, const AdamConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (const auto& [name, tensor] : store.map()) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(tensor.size(), 0.0);
    if (v.empty()) v.assign(tensor.size(), 0.0);
    if (m.size() != tensor.size())
      throw std::invalid_argument("adam_step: shape mismatch for " + name);
    const std::vector<double>& g = tensor.node()->grad;
    if (g.size() != tensor.size())
      throw std::invalid_argument("adam_step: missing gradient for " + name);
    std::vector<double>& w = tensor.node()->value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Checkpoint format "GMC1": magic, u32 param count, then per parameter
// (name-sorted): u32 name length, name bytes, u32 rank, u32 dims, f32 payload.
inline void save_checkpoint(const ParamStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write("GMC1", 4);
  std::uint32_t count = static_cast<std::uint32_t>(store.map().size());
  f.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, t] : store.map()) {
    std::uint32_t len = static_cast<std::uint32_t>(name.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(name.data(), len);
    std::uint32_t rank = 2;
    f.write(reinterpret_cast<const char*>(&rank), 4);
    std::uint32_t dims[2] = {static_cast<std::uint32_t>(t.rows()),
                             static_cast<std::uint32_t>(t.cols())};
    f.write(reinterpret_cast<const char*>(dims), 8);
    for (double v : t.values()) {
      float fv = static_cast<float>(v);
      f.write(reinterpret_cast<const char*>(&fv), 4);
    }
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

/// Load into the store. Parameters already present must match shapes exactly;
/// unseen names are created. Returns the number of parameters read.
inline std::size_t load_checkpoint(ParamStore& store, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "GMC1")
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::uint32_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 4);
  for (std::uint32_t p = 0; p < count; ++p) {
    std::uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    std::string name(len, '\0');
    f.read(name.data(), len);
    std::uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (rank != 2) throw std::runtime_error("load_checkpoint: unsupported rank in " + path);
    std::uint32_t dims[2];
    f.read(reinterpret_cast<char*>(dims), 8);
    if (!f) throw std::runtime_error("load_checkpoint: truncated header in " + path);
    std::vector<double> vals(static_cast<std::size_t>(dims[0]) * dims[1]);
    for (double& v : vals) {
      float fv = 0;
      f.read(reinterpret_cast<char*>(&fv), 4);
      v = static_cast<double>(fv);
    }
    if (!f) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
    if (store.has(name)) {
      Tensor t = store.get(name);
      if (t.rows() != dims[0] || t.cols() != dims[1])
        throw std::runtime_error("load_checkpoint: shape mismatch for " + name + ": store [" +
                                 std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                                 "] vs file [" + std::to_string(dims[0]) + "x" +
                                 std::to_string(dims[1]) + "]");
      t.mutable_values() = std::move(vals);
    } else {
      store.create_zeros(name, dims[0], dims[1]).mutable_values() = std::move(vals);
    }
  }
  return count;
}

}  // namespace gmc::ad
