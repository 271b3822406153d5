#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vecroute/errors.hpp"
#include "vecroute/nn/tensor.hpp"

namespace vecroute::nn {

// ---------------------------------------------------------------------------
// Dense kernels. (i,k,j) ordering with an accumulating inner loop keeps the
// hot path vectorizable on a single core.
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
template <class S>
void matmul_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const S aik = arow[kk];
      if (aik == S(0)) continue;
      const S* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class S>
void matmul_nt_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* brow = b + static_cast<std::size_t>(j) * k;
      S acc0 = 0, acc1 = 0;
      int kk = 0;
      for (; kk + 1 < k; kk += 2) {
        acc0 += arow[kk] * brow[kk];
        acc1 += arow[kk + 1] * brow[kk + 1];
      }
      if (kk < k) acc0 += arow[kk] * brow[kk];
      crow[j] += acc0 + acc1;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class S>
void matmul_tn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    const S* brow = b + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const S aik = arow[kk];
      if (aik == S(0)) continue;
      S* crow = c + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// Row-wise softmax in place, numerically stabilized.
template <class S>
void softmax_rows_inplace(Tensor<S>& t) {
  const int r = t.rows(), c = t.cols();
  for (int i = 0; i < r; ++i) {
    S* row = t.data() + static_cast<std::size_t>(i) * c;
    S mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    S sum = 0;
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const S inv = S(1) / sum;
    for (int j = 0; j < c; ++j) row[j] *= inv;
  }
}

// Mean negative log-likelihood over rows plus d(loss)/d(logits).
template <class S>
std::pair<S, Tensor<S>> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets) {
  const int r = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != r)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(r) + " logit rows");
  Tensor<S> probs = logits;
  softmax_rows_inplace(probs);
  S loss = 0;
  const S w = S(1) / static_cast<S>(r);
  Tensor<S> grad(logits.shape());
  for (int i = 0; i < r; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= c)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    loss -= w * std::log(std::max(probs.at(i, t), std::numeric_limits<S>::min()));
    for (int j = 0; j < c; ++j) grad.at(i, j) = w * (probs.at(i, j) - (j == t ? S(1) : S(0)));
  }
  return {loss, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class S>
struct Param {
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;

  explicit Param(Tensor<S> v) : value(std::move(v)) { grad.reset(value.shape()); }
  void zero_grad() { grad.fill(S(0)); }
};

template <class S>
class ParamStore {
 public:
  Param<S>& add(const std::string& name, Tensor<S> init) {
    if (map_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    order_.push_back(name);
    auto [it, _] = map_.emplace(name, Param<S>(std::move(init)));
    return it->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  Param<S>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw NotFoundError("unknown parameter: " + name);
    return it->second;
  }
  const Param<S>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw NotFoundError("unknown parameter: " + name);
    return it->second;
  }

  // Insertion order; deterministic across runs.
  const std::vector<std::string>& names() const { return order_; }

  void zero_grads() {
    for (auto& n : order_) map_.at(n).zero_grad();
  }

  void set_trainable(const std::string& prefix, bool on) {
    for (auto& n : order_)
      if (n.rfind(prefix, 0) == 0) map_.at(n).trainable = on;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (auto& name : order_) n += map_.at(name).value.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (auto& name : order_) {
      const Param<S>& p = map_.at(name);
      out.add(name, p.value.template cast<U>()).trainable = p.trainable;
    }
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Param<S>> map_;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

// Row of a mixed token / soft-vector input sequence. Exactly one of token /
// soft is set; soft indexes a row of the graph's soft-vector matrix node.
struct MixedRow {
  int token = -1;
  int soft = -1;
  static MixedRow tok(int id) { return {id, -1}; }
  static MixedRow vec(int idx) { return {-1, idx}; }
};

template <class S>
class Graph {
 public:
  struct Node {
    const Tensor<S>* ref = nullptr;  // leaf backed by external storage
    Tensor<S> owned;
    Tensor<S>* grad_sink = nullptr;  // parameter gradient accumulator
    std::vector<S> grad;             // lazily allocated
    bool needs_grad = false;
    std::vector<S> saved;
    std::function<void(Graph&, Node&)> backward;

    const Tensor<S>& val() const { return ref ? *ref : owned; }
  };

  // --- leaves ---

  // References external storage; caller keeps it alive for the graph's life.
  int input(const Tensor<S>& t) {
    Node n;
    n.ref = &t;
    return push(std::move(n));
  }

  int constant(Tensor<S> t) {
    Node n;
    n.owned = std::move(t);
    return push(std::move(n));
  }

  int param(Param<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    Node n;
    n.ref = &p.value;
    n.needs_grad = p.trainable;
    n.grad_sink = p.trainable ? &p.grad : nullptr;
    int id = push(std::move(n));
    param_nodes_.emplace(&p, id);
    return id;
  }

  // --- ops ---

  // x[A,I] * w[I,O] + b[O]
  int linear(int x, int w, int b) {
    const Tensor<S>&xv = val(x), &wv = val(w), &bv = val(b);
    if (xv.cols() != wv.rows() || wv.cols() != static_cast<int>(bv.size()))
      throw DimensionError("linear: x" + shape_str(xv.shape()) + " w" + shape_str(wv.shape()) +
                           " b" + shape_str(bv.shape()));
    const int m = xv.rows(), k = xv.cols(), n = wv.cols();
    Node node;
    node.owned.reset({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) node.owned.at(i, j) = bv[static_cast<std::size_t>(j)];
    matmul_acc(xv.data(), wv.data(), node.owned.data(), m, k, n);
    node.needs_grad = wants(x) || wants(w) || wants(b);
    node.backward = [x, w, b, m, k, n](Graph& g, Node& self) {
      const S* gy = self.grad.data();
      if (g.wants(x)) matmul_nt_acc(gy, g.val(w).data(), g.grad_buf(x), m, n, k);
      if (g.wants(w)) matmul_tn_acc(g.val(x).data(), gy, g.grad_buf(w), m, k, n);
      if (g.wants(b)) {
        S* gb = g.grad_buf(b);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gb[j] += gy[static_cast<std::size_t>(i) * n + j];
      }
    };
    return push(std::move(node));
  }

  int matmul(int a, int b) {
    const Tensor<S>&av = val(a), &bv = val(b);
    if (av.cols() != bv.rows())
      throw DimensionError("matmul: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const int m = av.rows(), k = av.cols(), n = bv.cols();
    Node node;
    node.owned.reset({m, n});
    matmul_acc(av.data(), bv.data(), node.owned.data(), m, k, n);
    node.needs_grad = wants(a) || wants(b);
    node.backward = [a, b, m, k, n](Graph& g, Node& self) {
      const S* gy = self.grad.data();
      if (g.wants(a)) matmul_nt_acc(gy, g.val(b).data(), g.grad_buf(a), m, n, k);
      if (g.wants(b)) matmul_tn_acc(g.val(a).data(), gy, g.grad_buf(b), m, k, n);
    };
    return push(std::move(node));
  }

  // a[M,K] * b[N,K]^T -> [M,N]; used for the weight-tied output head.
  int matmul_nt(int a, int b) {
    const Tensor<S>&av = val(a), &bv = val(b);
    if (av.cols() != bv.cols())
      throw DimensionError("matmul_nt: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const int m = av.rows(), k = av.cols(), n = bv.rows();
    Node node;
    node.owned.reset({m, n});
    matmul_nt_acc(av.data(), bv.data(), node.owned.data(), m, k, n);
    node.needs_grad = wants(a) || wants(b);
    node.backward = [a, b, m, k, n](Graph& g, Node& self) {
      const S* gy = self.grad.data();
      if (g.wants(a)) matmul_acc(gy, g.val(b).data(), g.grad_buf(a), m, n, k);
      if (g.wants(b)) matmul_tn_acc(gy, g.val(a).data(), g.grad_buf(b), n, m, k);
    };
    return push(std::move(node));
  }

  int add(int a, int b) {
    const Tensor<S>&av = val(a), &bv = val(b);
    if (av.shape() != bv.shape())
      throw DimensionError("add: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Node node;
    node.owned = av;
    for (std::size_t i = 0; i < bv.size(); ++i) node.owned[i] += bv[i];
    node.needs_grad = wants(a) || wants(b);
    node.backward = [a, b](Graph& g, Node& self) {
      for (int p : {a, b}) {
        if (!g.wants(p)) continue;
        S* gp = g.grad_buf(p);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i];
      }
    };
    return push(std::move(node));
  }

  int relu(int x) {
    Node node;
    node.owned = val(x);
    for (std::size_t i = 0; i < node.owned.size(); ++i)
      if (node.owned[i] < S(0)) node.owned[i] = S(0);
    node.needs_grad = wants(x);
    node.backward = [x](Graph& g, Node& self) {
      if (!g.wants(x)) return;
      S* gx = g.grad_buf(x);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (self.owned[i] > S(0)) gx[i] += self.grad[i];
    };
    return push(std::move(node));
  }

  // Row-wise layer normalization with affine scale/shift.
  int layer_norm(int x, int gamma, int beta, S eps = S(1e-5)) {
    const Tensor<S>&xv = val(x), &gv = val(gamma), &bv = val(beta);
    const int r = xv.rows(), c = xv.cols();
    if (static_cast<int>(gv.size()) != c || static_cast<int>(bv.size()) != c)
      throw DimensionError("layer_norm: x" + shape_str(xv.shape()) + " gamma" + shape_str(gv.shape()) +
                           " beta" + shape_str(bv.shape()));
    Node node;
    node.owned.reset({r, c});
    node.saved.resize(static_cast<std::size_t>(r) * 2);  // per-row mean, inv_std
    for (int i = 0; i < r; ++i) {
      const S* row = xv.data() + static_cast<std::size_t>(i) * c;
      S mean = 0;
      for (int j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<S>(c);
      S var = 0;
      for (int j = 0; j < c; ++j) {
        const S d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<S>(c);
      const S inv = S(1) / std::sqrt(var + eps);
      node.saved[static_cast<std::size_t>(i) * 2] = mean;
      node.saved[static_cast<std::size_t>(i) * 2 + 1] = inv;
      S* out = node.owned.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) out[j] = (row[j] - mean) * inv * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
    node.needs_grad = wants(x) || wants(gamma) || wants(beta);
    node.backward = [x, gamma, beta, r, c](Graph& g, Node& self) {
      const Tensor<S>& xv2 = g.val(x);
      const Tensor<S>& gv2 = g.val(gamma);
      S* gx = g.wants(x) ? g.grad_buf(x) : nullptr;
      S* gg = g.wants(gamma) ? g.grad_buf(gamma) : nullptr;
      S* gb = g.wants(beta) ? g.grad_buf(beta) : nullptr;
      for (int i = 0; i < r; ++i) {
        const S mean = self.saved[static_cast<std::size_t>(i) * 2];
        const S inv = self.saved[static_cast<std::size_t>(i) * 2 + 1];
        const S* row = xv2.data() + static_cast<std::size_t>(i) * c;
        const S* gy = self.grad.data() + static_cast<std::size_t>(i) * c;
        S sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int j = 0; j < c; ++j) {
          const S xhat = (row[j] - mean) * inv;
          const S dxhat = gy[j] * gv2[static_cast<std::size_t>(j)];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (gg) gg[j] += gy[j] * xhat;
          if (gb) gb[j] += gy[j];
        }
        if (gx) {
          const S invc = S(1) / static_cast<S>(c);
          S* gxr = gx + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            const S xhat = (row[j] - mean) * inv;
            const S dxhat = gy[j] * gv2[static_cast<std::size_t>(j)];
            gxr[j] += inv * (dxhat - invc * sum_dxhat - xhat * invc * sum_dxhat_xhat);
          }
        }
      }
    };
    return push(std::move(node));
  }

  // Multi-head scaled dot-product attention with a causal mask.
  // q, k, v: [L,d]; d divisible by heads. Softmax weights are saved per head.
  int causal_attention(int q, int k, int v, int heads) {
    const Tensor<S>&qv = val(q), &kv = val(k), &vv = val(v);
    const int L = qv.rows(), d = qv.cols();
    if (kv.shape() != qv.shape() || vv.shape() != qv.shape())
      throw DimensionError("attention: q" + shape_str(qv.shape()) + " k" + shape_str(kv.shape()) +
                           " v" + shape_str(vv.shape()));
    if (heads <= 0 || d % heads != 0)
      throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                        std::to_string(heads) + " heads");
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Node node;
    node.owned.reset({L, d});
    node.saved.assign(static_cast<std::size_t>(heads) * L * L, S(0));
    for (int h = 0; h < heads; ++h) {
      const int hs = h * dh;
      for (int t = 0; t < L; ++t) {
        S* w = node.saved.data() + (static_cast<std::size_t>(h) * L + t) * L;
        const S* qrow = qv.data() + static_cast<std::size_t>(t) * d + hs;
        S mx = std::numeric_limits<S>::lowest();
        for (int s = 0; s <= t; ++s) {
          const S* krow = kv.data() + static_cast<std::size_t>(s) * d + hs;
          S acc = 0;
          for (int j = 0; j < dh; ++j) acc += qrow[j] * krow[j];
          acc *= scale;
          w[s] = acc;
          mx = std::max(mx, acc);
        }
        S sum = 0;
        for (int s = 0; s <= t; ++s) {
          w[s] = std::exp(w[s] - mx);
          sum += w[s];
        }
        const S inv = S(1) / sum;
        S* out = node.owned.data() + static_cast<std::size_t>(t) * d + hs;
        for (int s = 0; s <= t; ++s) {
          w[s] *= inv;
          const S* vrow = vv.data() + static_cast<std::size_t>(s) * d + hs;
          for (int j = 0; j < dh; ++j) out[j] += w[s] * vrow[j];
        }
      }
    }
    node.needs_grad = wants(q) || wants(k) || wants(v);
    node.backward = [q, k, v, heads, L, d, dh, scale](Graph& g, Node& self) {
      const Tensor<S>& qv2 = g.val(q);
      const Tensor<S>& kv2 = g.val(k);
      const Tensor<S>& vv2 = g.val(v);
      S* gq = g.wants(q) ? g.grad_buf(q) : nullptr;
      S* gk = g.wants(k) ? g.grad_buf(k) : nullptr;
      S* gv = g.wants(v) ? g.grad_buf(v) : nullptr;
      std::vector<S> dscore(static_cast<std::size_t>(L));
      for (int h = 0; h < heads; ++h) {
        const int hs = h * dh;
        for (int t = 0; t < L; ++t) {
          const S* w = self.saved.data() + (static_cast<std::size_t>(h) * L + t) * L;
          const S* gy = self.grad.data() + static_cast<std::size_t>(t) * d + hs;
          S sum_dw_w = 0;
          for (int s = 0; s <= t; ++s) {
            const S* vrow = vv2.data() + static_cast<std::size_t>(s) * d + hs;
            S acc = 0;
            for (int j = 0; j < dh; ++j) acc += gy[j] * vrow[j];
            dscore[static_cast<std::size_t>(s)] = acc;
            sum_dw_w += acc * w[s];
            if (gv) {
              S* gvrow = gv + static_cast<std::size_t>(s) * d + hs;
              for (int j = 0; j < dh; ++j) gvrow[j] += w[s] * gy[j];
            }
          }
          if (!gq && !gk) continue;
          const S* qrow = qv2.data() + static_cast<std::size_t>(t) * d + hs;
          for (int s = 0; s <= t; ++s) {
            const S ds = w[s] * (dscore[static_cast<std::size_t>(s)] - sum_dw_w) * scale;
            const S* krow = kv2.data() + static_cast<std::size_t>(s) * d + hs;
            if (gq) {
              S* gqrow = gq + static_cast<std::size_t>(t) * d + hs;
              for (int j = 0; j < dh; ++j) gqrow[j] += ds * krow[j];
            }
            if (gk) {
              S* gkrow = gk + static_cast<std::size_t>(s) * d + hs;
              for (int j = 0; j < dh; ++j) gkrow[j] += ds * qrow[j];
            }
          }
        }
      }
    };
    return push(std::move(node));
  }

  // Builds the router input matrix from a mixed sequence: token rows come
  // from the embedding table, soft rows from `soft_matrix` scaled by the
  // learned gain; learned absolute position embeddings are added to all rows.
  int embed_mixed(const std::vector<MixedRow>& rows, int tok_table, int pos_table, int gain, int soft_matrix) {
    const Tensor<S>&ev = val(tok_table), &pv = val(pos_table), &gv = val(gain);
    const int L = static_cast<int>(rows.size());
    const int d = ev.cols();
    if (L == 0) throw ValidationError("embed_mixed: empty sequence");
    if (L > pv.rows())
      throw LengthError("embed_mixed: sequence length " + std::to_string(L) + " exceeds position table " +
                        std::to_string(pv.rows()));
    if (pv.cols() != d || gv.size() != 1)
      throw DimensionError("embed_mixed: table" + shape_str(ev.shape()) + " pos" + shape_str(pv.shape()));
    const Tensor<S>* sv = nullptr;
    if (soft_matrix >= 0) {
      sv = &val(soft_matrix);
      if (sv->cols() != d)
        throw DimensionError("embed_mixed: soft rows " + shape_str(sv->shape()) + " vs width " + std::to_string(d));
    }
    Node node;
    node.owned.reset({L, d});
    const S g0 = gv[0];
    for (int t = 0; t < L; ++t) {
      const MixedRow& it = rows[static_cast<std::size_t>(t)];
      S* out = node.owned.data() + static_cast<std::size_t>(t) * d;
      const S* pos = pv.data() + static_cast<std::size_t>(t) * d;
      if (it.token >= 0) {
        if (it.token >= ev.rows())
          throw IndexError("embed_mixed: token id " + std::to_string(it.token) + " outside vocab " +
                           std::to_string(ev.rows()));
        const S* emb = ev.data() + static_cast<std::size_t>(it.token) * d;
        for (int j = 0; j < d; ++j) out[j] = emb[j] + pos[j];
      } else {
        if (!sv || it.soft < 0 || it.soft >= sv->rows())
          throw IndexError("embed_mixed: soft index " + std::to_string(it.soft) + " out of range");
        const S* src = sv->data() + static_cast<std::size_t>(it.soft) * d;
        for (int j = 0; j < d; ++j) out[j] = g0 * src[j] + pos[j];
      }
    }
    node.needs_grad = wants(tok_table) || wants(pos_table) || wants(gain) ||
                      (soft_matrix >= 0 && wants(soft_matrix));
    auto rows_copy = rows;
    node.backward = [rows_copy, tok_table, pos_table, gain, soft_matrix, L, d, g0](Graph& g, Node& self) {
      S* ge = g.wants(tok_table) ? g.grad_buf(tok_table) : nullptr;
      S* gp = g.wants(pos_table) ? g.grad_buf(pos_table) : nullptr;
      S* gg = g.wants(gain) ? g.grad_buf(gain) : nullptr;
      S* gs = (soft_matrix >= 0 && g.wants(soft_matrix)) ? g.grad_buf(soft_matrix) : nullptr;
      const Tensor<S>* sv2 = soft_matrix >= 0 ? &g.val(soft_matrix) : nullptr;
      for (int t = 0; t < L; ++t) {
        const MixedRow& it = rows_copy[static_cast<std::size_t>(t)];
        const S* gy = self.grad.data() + static_cast<std::size_t>(t) * d;
        if (gp) {
          S* prow = gp + static_cast<std::size_t>(t) * d;
          for (int j = 0; j < d; ++j) prow[j] += gy[j];
        }
        if (it.token >= 0) {
          if (ge) {
            S* erow = ge + static_cast<std::size_t>(it.token) * d;
            for (int j = 0; j < d; ++j) erow[j] += gy[j];
          }
        } else {
          const S* src = sv2->data() + static_cast<std::size_t>(it.soft) * d;
          if (gs) {
            S* srow = gs + static_cast<std::size_t>(it.soft) * d;
            for (int j = 0; j < d; ++j) srow[j] += g0 * gy[j];
          }
          if (gg) {
            S acc = 0;
            for (int j = 0; j < d; ++j) acc += src[j] * gy[j];
            gg[0] += acc;
          }
        }
      }
    };
    return push(std::move(node));
  }

  int select_rows(int x, std::vector<int> rows) {
    const Tensor<S>& xv = val(x);
    const int c = xv.cols();
    Node node;
    node.owned.reset({static_cast<int>(rows.size()), c});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int r = rows[i];
      if (r < 0 || r >= xv.rows())
        throw IndexError("select_rows: row " + std::to_string(r) + " outside [0, " + std::to_string(xv.rows()) + ")");
      for (int j = 0; j < c; ++j) node.owned.at(static_cast<int>(i), j) = xv.at(r, j);
    }
    node.needs_grad = wants(x);
    node.backward = [x, rows = std::move(rows), c](Graph& g, Node& self) {
      if (!g.wants(x)) return;
      S* gx = g.grad_buf(x);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < c; ++j)
          gx[static_cast<std::size_t>(rows[i]) * c + j] += self.grad[i * c + j];
    };
    return push(std::move(node));
  }

  // Picks individual columns of one row: -> [1, cols.size()].
  int gather_cols(int x, int row, std::vector<int> cols) {
    const Tensor<S>& xv = val(x);
    if (row < 0 || row >= xv.rows())
      throw IndexError("gather_cols: row " + std::to_string(row) + " outside [0, " + std::to_string(xv.rows()) + ")");
    Node node;
    node.owned.reset({1, static_cast<int>(cols.size())});
    for (std::size_t i = 0; i < cols.size(); ++i) {
      const int cc = cols[i];
      if (cc < 0 || cc >= xv.cols())
        throw IndexError("gather_cols: col " + std::to_string(cc) + " outside [0, " + std::to_string(xv.cols()) + ")");
      node.owned[i] = xv.at(row, cc);
    }
    node.needs_grad = wants(x);
    const int w = xv.cols();
    node.backward = [x, row, cols = std::move(cols), w](Graph& g, Node& self) {
      if (!g.wants(x)) return;
      S* gx = g.grad_buf(x);
      for (std::size_t i = 0; i < cols.size(); ++i)
        gx[static_cast<std::size_t>(row) * w + cols[i]] += self.grad[i];
    };
    return push(std::move(node));
  }

  // Per-row softmax cross-entropy against integer targets, combined with the
  // given row weights (default: mean over rows). Returns a scalar node.
  int softmax_xent(int logits, std::vector<int> targets, std::vector<S> row_weights = {}) {
    const Tensor<S>& lv = val(logits);
    const int r = lv.rows(), c = lv.cols();
    if (static_cast<int>(targets.size()) != r)
      throw DimensionError("softmax_xent: " + std::to_string(targets.size()) + " targets for " +
                           std::to_string(r) + " rows");
    if (row_weights.empty()) row_weights.assign(static_cast<std::size_t>(r), S(1) / static_cast<S>(r));
    if (static_cast<int>(row_weights.size()) != r)
      throw DimensionError("softmax_xent: weight count mismatch");
    Node node;
    node.saved.resize(static_cast<std::size_t>(r) * c);
    std::copy(lv.data(), lv.data() + node.saved.size(), node.saved.begin());
    {
      Tensor<S> tmp({r, c}, node.saved);
      softmax_rows_inplace(tmp);
      std::copy(tmp.data(), tmp.data() + tmp.size(), node.saved.begin());
    }
    S loss = 0;
    for (int i = 0; i < r; ++i) {
      const int t = targets[static_cast<std::size_t>(i)];
      if (t < 0 || t >= c)
        throw IndexError("softmax_xent: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
      const S p = node.saved[static_cast<std::size_t>(i) * c + t];
      loss -= row_weights[static_cast<std::size_t>(i)] * std::log(std::max(p, std::numeric_limits<S>::min()));
    }
    node.owned = Tensor<S>::scalar(loss);
    node.needs_grad = wants(logits);
    node.backward = [logits, targets = std::move(targets), row_weights = std::move(row_weights), r, c](
                        Graph& g, Node& self) {
      if (!g.wants(logits)) return;
      S* gl = g.grad_buf(logits);
      const S up = self.grad[0];
      for (int i = 0; i < r; ++i) {
        const S w = up * row_weights[static_cast<std::size_t>(i)];
        const int t = targets[static_cast<std::size_t>(i)];
        const S* p = self.saved.data() + static_cast<std::size_t>(i) * c;
        S* go = gl + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) go[j] += w * (p[j] - (j == t ? S(1) : S(0)));
      }
    };
    return push(std::move(node));
  }

  // Scalar combination sum_i w_i * terms_i; used to assemble batch losses.
  int weighted_sum(std::vector<int> terms, std::vector<S> weights) {
    if (terms.size() != weights.size() || terms.empty())
      throw DimensionError("weighted_sum: needs matching non-empty terms/weights");
    S total = 0;
    bool ng = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      const Tensor<S>& tv = val(terms[i]);
      if (tv.size() != 1) throw DimensionError("weighted_sum: term " + std::to_string(i) + " not scalar");
      total += weights[i] * tv[0];
      ng = ng || wants(terms[i]);
    }
    Node node;
    node.owned = Tensor<S>::scalar(total);
    node.needs_grad = ng;
    node.backward = [terms = std::move(terms), weights = std::move(weights)](Graph& g, Node& self) {
      for (std::size_t i = 0; i < terms.size(); ++i)
        if (g.wants(terms[i])) g.grad_buf(terms[i])[0] += weights[i] * self.grad[0];
    };
    return push(std::move(node));
  }

  // --- execution ---

  const Tensor<S>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].val(); }

  bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  S* grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.val().size(), S(0));
    return n.grad.data();
  }

  // Reverse pass from a scalar loss node. Parameter gradients are
  // accumulated into their Param::grad sinks.
  void backward(int loss) {
    Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (ln.val().size() != 1) throw DimensionError("backward: loss must be scalar");
    if (!std::isfinite(static_cast<double>(ln.val()[0])))
      throw DivergenceError("backward: non-finite loss");
    grad_buf(loss)[0] += S(1);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n);
      if (n.grad_sink) {
        S* sink = n.grad_sink->data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) sink[i] += n.grad[i];
      }
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::deque<Node> nodes_;
  std::map<const Param<S>*, int> param_nodes_;
};

}  // namespace vecroute::nn
