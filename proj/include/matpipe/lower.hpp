#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "matpipe/model.hpp"
#include "matpipe/primitive.hpp"

namespace matpipe {

// Segment sizing per operator class. weighted applies to the first FC/Conv1D
// (the one that sees the wide input), embed is the embedding granularity
// (features per lookup), pair sizes the two-input element pairing for
// Hadamard/AbsDiffSum. Weighted layers after the first consume their whole
// input unless inner_weighted_segment is set; post-fusion activations are
// narrow, so splitting them only multiplies lookups.
struct PartitionPolicy {
  int weighted_segment = 2;
  int embed_segment = 1;
  int pair_segment = 1;
  int inner_weighted_segment = 0;  // 0 = whole input
};

namespace detail {

struct LowerCtx {
  PrimitiveGraph g;
  std::map<std::string, std::vector<PartRef>> binding;  // tensor -> parts
  std::map<std::string, int> arity;                     // tensor -> length

  int add_partition(const std::vector<PartRef>& sources,
                    std::vector<Segment> segs, const std::string& prov) {
    PrimitiveNode n;
    n.kind = PrimKind::Partition;
    n.sources = sources;
    n.segments = std::move(segs);
    n.provenance = prov;
    return g.add(std::move(n));
  }
  int add_map(int partition, std::vector<MapFunction> members,
              const std::string& prov) {
    PrimitiveNode n;
    n.kind = PrimKind::Map;
    n.partition = partition;
    n.members = std::move(members);
    n.provenance = prov;
    return g.add(std::move(n));
  }
  int add_sum(std::vector<PartRef> inputs, int out_arity, const std::string& prov) {
    PrimitiveNode n;
    n.kind = PrimKind::SumReduce;
    n.inputs = std::move(inputs);
    n.out_arity = out_arity;
    n.provenance = prov;
    return g.add(std::move(n));
  }

  // Contiguous split of a tensor binding into ceil(n/size) segments.
  int split_binding(const std::vector<PartRef>& refs, int total, int size,
                    const std::string& prov, std::vector<Segment>* out_segs = nullptr) {
    std::vector<Segment> segs;
    for (int start = 0; start < total; start += size)
      segs.push_back(Segment::contiguous(start, std::min(size, total - start)));
    if (out_segs) *out_segs = segs;
    return add_partition(refs, std::move(segs), prov);
  }
};

// Weighted aggregation: partition the input, one affine member per segment
// producing a full partial output, one SumReduce. The bias rides on the
// first member so the sum adds it exactly once.
inline PartRef lower_weighted(LowerCtx& ctx, const std::vector<PartRef>& in_refs,
                              int in_len, const Mat& w, const Vec& b,
                              int seg_size, const std::string& prov) {
  int out_len = int(w.size());
  std::vector<Segment> segs;
  int p = ctx.split_binding(in_refs, in_len, seg_size, prov, &segs);
  std::vector<MapFunction> members;
  for (size_t si = 0; si < segs.size(); ++si) {
    auto pos = segs[si].positions();
    Mat a = zeros(out_len, pos.size());
    for (int r = 0; r < out_len; ++r)
      for (size_t c = 0; c < pos.size(); ++c) a[r][c] = w[r][pos[c]];
    Vec cc = si == 0 ? b : Vec(out_len, 0.0);
    members.push_back(MapFunction::affine(std::move(a), std::move(cc)));
  }
  int m = ctx.add_map(p, std::move(members), prov);
  std::vector<PartRef> inputs;
  for (size_t si = 0; si < segs.size(); ++si) inputs.push_back({m, int(si)});
  int sr = ctx.add_sum(std::move(inputs), out_len, prov);
  return {sr, 0};
}

inline PartRef lower_elementwise_fn(LowerCtx& ctx, const std::vector<PartRef>& in_refs,
                                    int in_len, MapFunction fn, const std::string& prov) {
  int p = ctx.add_partition(in_refs, {Segment::contiguous(0, in_len)}, prov);
  int m = ctx.add_map(p, {std::move(fn)}, prov);
  return {m, 0};
}

inline std::vector<PartRef> lower_softmax_into(LowerCtx& ctx,
                                               const std::vector<PartRef>& in_refs,
                                               int dim, const std::string& prov) {
  // exponentiate per element, sum, reciprocal, then pairwise recombine
  std::vector<Segment> unit;
  for (int i = 0; i < dim; ++i) unit.push_back(Segment::contiguous(i, 1));
  int p_exp = ctx.add_partition(in_refs, std::move(unit), prov);
  std::vector<MapFunction> exps(dim, MapFunction::elementwise(EwOp::Exp, 1));
  int m_exp = ctx.add_map(p_exp, std::move(exps), prov);

  std::vector<PartRef> sum_in;
  for (int i = 0; i < dim; ++i) sum_in.push_back({m_exp, i});
  int sr = ctx.add_sum(std::move(sum_in), 1, prov);

  int p_recip = ctx.add_partition({{sr, 0}}, {Segment::contiguous(0, 1)}, prov);
  int m_recip = ctx.add_map(p_recip, {MapFunction::elementwise(EwOp::Recip, 1)}, prov);

  // pair partition over [e^{x_0} .. e^{x_{d-1}}, 1/s]
  std::vector<PartRef> pair_src;
  for (int i = 0; i < dim; ++i) pair_src.push_back({m_exp, i});
  pair_src.push_back({m_recip, 0});
  std::vector<Segment> pairs;
  for (int i = 0; i < dim; ++i)
    pairs.push_back(Segment{{{i, 1}, {dim, 1}}});
  int p_comb = ctx.add_partition(pair_src, std::move(pairs), prov);
  std::vector<MapFunction> muls(dim, MapFunction::pair_mul(1));
  int m_comb = ctx.add_map(p_comb, std::move(muls), prov);

  std::vector<PartRef> out;
  for (int i = 0; i < dim; ++i) out.push_back({m_comb, i});
  return out;
}

inline PartRef lower_avgpool_into(LowerCtx& ctx, const std::vector<PartRef>& in_refs,
                                  int in_len, int k, const std::string& prov) {
  int n = in_len / k;
  // segment j gathers the j-th element of every window (arity n), so one
  // SumReduce over the k segments yields all window sums at once
  std::vector<Segment> segs(k);
  for (int j = 0; j < k; ++j) {
    std::vector<int> pos;
    for (int w = 0; w < n; ++w) pos.push_back(w * k + j);
    segs[j] = Segment::from_positions(pos);
  }
  int p = ctx.add_partition(in_refs, std::move(segs), prov);
  std::vector<PartRef> sum_in;
  for (int j = 0; j < k; ++j) sum_in.push_back({p, j});
  int sr = ctx.add_sum(std::move(sum_in), n, prov);

  Mat a = zeros(n, n);
  for (int i = 0; i < n; ++i) a[i][i] = 1.0 / k;
  return lower_elementwise_fn(ctx, {{sr, 0}}, n,
                              MapFunction::affine(std::move(a), Vec(n, 0.0)), prov);
}

inline std::vector<PartRef> lower_maxpool_into(LowerCtx& ctx,
                                               std::vector<PartRef> cur_refs,
                                               int in_len, int k,
                                               const std::string& prov) {
  // chain of pairwise-max levels of depth ceil(log2 k); odd leftovers pass
  // through an identity member and pair up at the next level
  int windows = in_len / k;
  int per_window = k;
  while (per_window > 1) {
    int pairs = per_window / 2;
    bool odd = per_window % 2 == 1;
    std::vector<Segment> segs;
    std::vector<MapFunction> members;
    for (int w = 0; w < windows; ++w) {
      int base = w * per_window;
      for (int j = 0; j < pairs; ++j) {
        segs.push_back(Segment{{{base + 2 * j, 1}, {base + 2 * j + 1, 1}}});
        members.push_back(MapFunction::pair_max(1));
      }
      if (odd) {
        segs.push_back(Segment::contiguous(base + 2 * pairs, 1));
        members.push_back(MapFunction::identity(1));
      }
    }
    int p = ctx.add_partition(cur_refs, std::move(segs), prov);
    int m = ctx.add_map(p, std::move(members), prov);
    int parts_per_window = pairs + (odd ? 1 : 0);
    cur_refs.clear();
    for (int i = 0; i < windows * parts_per_window; ++i) cur_refs.push_back({m, i});
    per_window = parts_per_window;
  }
  return cur_refs;
}

// Two-input pairing: interleaves aligned slices of u and v into 2s-wide
// segments for PairMul / AbsDiffAcc members.
inline int pair_partition(LowerCtx& ctx, const std::vector<PartRef>& u,
                          const std::vector<PartRef>& v, int n, int s,
                          const std::string& prov, int* seg_count) {
  std::vector<PartRef> src = u;
  src.insert(src.end(), v.begin(), v.end());
  std::vector<Segment> segs;
  for (int start = 0; start < n; start += s) {
    int len = std::min(s, n - start);
    segs.push_back(Segment{{{start, len}, {n + start, len}}});
  }
  *seg_count = int(segs.size());
  return ctx.add_partition(src, std::move(segs), prov);
}

}  // namespace detail

// Lowers each layer by operator class into Partition / Map / SumReduce
// nodes. The resulting graph evaluates (at full precision) to exactly what
// reference_infer computes.
inline PrimitiveGraph lower(const ModelGraph& m, const PartitionPolicy& policy) {
  if (policy.weighted_segment < 1 || policy.embed_segment < 1 ||
      policy.pair_segment < 1)
    throw Error("lower", "segment sizes must be >= 1");
  detail::LowerCtx ctx;
  ctx.g.input_arity = m.input_len();
  ctx.binding[m.input] = {{-1, 0}};
  ctx.arity[m.input] = m.input_len();
  bool weighted_seen = false;
  auto weighted_seg = [&](int in_len) {
    int seg = weighted_seen
                  ? (policy.inner_weighted_segment > 0 ? policy.inner_weighted_segment
                                                       : in_len)
                  : policy.weighted_segment;
    weighted_seen = true;
    return std::min(seg, in_len);
  };

  for (const auto& l : m.layers) {
    const auto& in_refs = ctx.binding.at(l.inputs[0]);
    int in_len = ctx.arity.at(l.inputs[0]);
    std::vector<PartRef> out_refs;
    int out_len = in_len;

    switch (l.kind) {
      case LayerKind::FC: {
        out_refs = {detail::lower_weighted(ctx, in_refs, in_len, l.weight, l.bias,
                                           weighted_seg(in_len), l.name)};
        out_len = int(l.weight.size());
        break;
      }
      case LayerKind::Conv1D: {
        int filters = int(l.weight.size());
        int kernel = int(l.weight[0].size());
        int pos = detail::conv_positions(in_len, kernel, l.stride);
        Mat w = zeros(size_t(filters) * pos, in_len);
        for (int f = 0; f < filters; ++f)
          for (int t = 0; t < pos; ++t)
            for (int j = 0; j < kernel; ++j)
              w[size_t(f) * pos + t][t * l.stride + j] = l.weight[f][j];
        out_refs = {detail::lower_weighted(ctx, in_refs, in_len, w, Vec(w.size(), 0.0),
                                           weighted_seg(in_len), l.name)};
        out_len = int(w.size());
        break;
      }
      case LayerKind::BatchNorm: {
        Mat a = zeros(in_len, in_len);
        Vec c(in_len);
        for (int i = 0; i < in_len; ++i) {
          a[i][i] = l.gamma[i] / l.sigma[i];
          c[i] = l.beta[i] - l.gamma[i] * l.mean[i] / l.sigma[i];
        }
        out_refs = {detail::lower_elementwise_fn(
            ctx, in_refs, in_len, MapFunction::affine(std::move(a), std::move(c)),
            l.name)};
        break;
      }
      case LayerKind::Bias: {
        Mat a = zeros(in_len, in_len);
        for (int i = 0; i < in_len; ++i) a[i][i] = 1.0;
        out_refs = {detail::lower_elementwise_fn(
            ctx, in_refs, in_len, MapFunction::affine(std::move(a), l.bias), l.name)};
        break;
      }
      case LayerKind::ReLU:
        out_refs = {detail::lower_elementwise_fn(
            ctx, in_refs, in_len, MapFunction::elementwise(EwOp::ReLU, in_len), l.name)};
        break;
      case LayerKind::Tanh:
        out_refs = {detail::lower_elementwise_fn(
            ctx, in_refs, in_len, MapFunction::elementwise(EwOp::Tanh, in_len), l.name)};
        break;
      case LayerKind::Sigmoid:
        out_refs = {detail::lower_elementwise_fn(
            ctx, in_refs, in_len, MapFunction::elementwise(EwOp::Sigmoid, in_len), l.name)};
        break;
      case LayerKind::Softmax:
        out_refs = detail::lower_softmax_into(ctx, in_refs, in_len, l.name);
        break;
      case LayerKind::AvgPool:
        if (in_len % l.window != 0)
          throw Error("lower", "pool window does not divide input in " + l.name);
        out_refs = {detail::lower_avgpool_into(ctx, in_refs, in_len, l.window, l.name)};
        out_len = in_len / l.window;
        break;
      case LayerKind::MaxPool:
        if (in_len % l.window != 0)
          throw Error("lower", "pool window does not divide input in " + l.name);
        out_refs = detail::lower_maxpool_into(ctx, in_refs, in_len, l.window, l.name);
        out_len = in_len / l.window;
        break;
      case LayerKind::Embedding: {
        int seg = std::min(policy.embed_segment, in_len);
        std::vector<Segment> segs;
        int p = ctx.split_binding(in_refs, in_len, seg, l.name, &segs);
        int dim = int(l.weight[0].size());
        std::vector<MapFunction> members;
        for (const auto& s : segs)
          members.push_back(MapFunction::embed_rows(l.weight, l.emb_lo, l.emb_hi,
                                                    s.length()));
        int mm = ctx.add_map(p, std::move(members), l.name);
        for (size_t i = 0; i < segs.size(); ++i) out_refs.push_back({mm, int(i)});
        out_len = in_len * dim;
        break;
      }
      case LayerKind::Hadamard: {
        const auto& v_refs = ctx.binding.at(l.inputs[1]);
        int s = std::min(policy.pair_segment, in_len);
        int count = 0;
        int p = detail::pair_partition(ctx, in_refs, v_refs, in_len, s, l.name, &count);
        std::vector<MapFunction> members;
        for (int start = 0; start < in_len; start += s)
          members.push_back(MapFunction::pair_mul(std::min(s, in_len - start)));
        int mm = ctx.add_map(p, std::move(members), l.name);
        for (int i = 0; i < count; ++i) out_refs.push_back({mm, i});
        break;
      }
      case LayerKind::AbsDiffSum: {
        const auto& v_refs = ctx.binding.at(l.inputs[1]);
        int s = std::min(policy.pair_segment, in_len);
        int count = 0;
        int p = detail::pair_partition(ctx, in_refs, v_refs, in_len, s, l.name, &count);
        std::vector<MapFunction> members;
        for (int start = 0; start < in_len; start += s)
          members.push_back(MapFunction::abs_diff_acc(std::min(s, in_len - start)));
        int mm = ctx.add_map(p, std::move(members), l.name);
        std::vector<PartRef> sum_in;
        for (int i = 0; i < count; ++i) sum_in.push_back({mm, i});
        int sr = ctx.add_sum(std::move(sum_in), 1, l.name);
        out_refs = {{sr, 0}};
        out_len = 1;
        break;
      }
      case LayerKind::Slice: {
        int p = ctx.add_partition(in_refs, {Segment::contiguous(l.offset, l.len)},
                                  l.name);
        out_refs = {{p, 0}};
        out_len = l.len;
        break;
      }
      case LayerKind::Sum: {
        std::vector<PartRef> sum_in;
        for (const auto& tn : l.inputs) {
          const auto& refs = ctx.binding.at(tn);
          if (refs.size() == 1) {
            sum_in.push_back(refs[0]);
          } else {
            // merge multi-part bindings into one part first (free gather)
            int p = ctx.add_partition(refs, {Segment::contiguous(0, in_len)}, l.name);
            sum_in.push_back({p, 0});
          }
        }
        int sr = ctx.add_sum(std::move(sum_in), in_len, l.name);
        out_refs = {{sr, 0}};
        break;
      }
    }

    ctx.binding[l.output] = out_refs;
    ctx.arity[l.output] = out_len;
  }

  ctx.g.outputs = ctx.binding.at(m.output);
  auto errs = check_graph(ctx.g);
  if (!errs.empty()) throw Error("lower", "internal graph error: " + errs[0]);
  return ctx.g;
}

// Stand-alone fragment builders used directly by tests and the DSL docs.
inline PrimitiveGraph lower_softmax(int dim) {
  if (dim < 1) throw Error("lower", "dim must be >= 1");
  detail::LowerCtx ctx;
  ctx.g.input_arity = dim;
  ctx.g.outputs = detail::lower_softmax_into(ctx, {{-1, 0}}, dim, "softmax");
  return ctx.g;
}

inline PrimitiveGraph lower_pool(LayerKind kind, int window, int length) {
  if (window < 1) throw Error("lower", "window must be >= 1");
  if (length % window != 0) throw Error("lower", "window does not divide length");
  detail::LowerCtx ctx;
  ctx.g.input_arity = length;
  if (kind == LayerKind::AvgPool)
    ctx.g.outputs = {detail::lower_avgpool_into(ctx, {{-1, 0}}, length, window, "avgpool")};
  else
    ctx.g.outputs = detail::lower_maxpool_into(ctx, {{-1, 0}}, length, window, "maxpool");
  return ctx.g;
}

}  // namespace matpipe
