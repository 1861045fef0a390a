#include "dopq/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace dopq {

using nlohmann::json;

// -- threading ----------------------------------------------------------------

int resolve_threads(int requested) {
  if (requested > 0) return std::min(requested, 64);
  if (const char* env = std::getenv("DOPQ_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return std::min(v, 64);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 8u));
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t t = std::min<std::size_t>(std::max(threads, 1), n);
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(t);
  const std::size_t chunk = (n + t - 1) / t;
  for (std::size_t w = 0; w < t; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& w : workers) w.join();
}

// -- block loss ---------------------------------------------------------------

namespace {

double sse_of(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

QuantPlan single_block_view(const BlockPlan& bp) {
  QuantPlan p;
  p.weights_enabled = false;
  p.blocks = {bp};
  return p;
}

}  // namespace

double block_loss(const BlockRecord& rec) {
  if (rec.inputs.empty() || rec.inputs.size() != rec.fp_outputs.size())
    throw DimensionError("block_loss: record not populated");
  double sse = 0.0;
  std::size_t elems = 0;
  for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
    ForwardCtx ctx;
    ctx.plan = rec.plan;
    ctx.block = rec.index;
    const Tensor out = block_forward(rec.inputs[i], *rec.weights, rec.heads, ctx);
    if (!out.same_shape(rec.fp_outputs[i]))
      throw DimensionError("block_loss: output shape mismatch");
    sse += sse_of(out, rec.fp_outputs[i]);
    elems += out.size();
  }
  return std::sqrt(sse / static_cast<double>(elems));
}

// -- calibration ---------------------------------------------------------------

namespace {

constexpr std::size_t kSoftmaxSampleCap = 4096;

class StatsCollector : public SiteObserver {
 public:
  StatsCollector(int blocks, std::size_t softmax_stride)
      : stats_(blocks), stride_(std::max<std::size_t>(1, softmax_stride)) {
    seen_.assign(blocks, 0);
  }

  void observe(int block, Site site, const Tensor& value) override {
    auto& st = stats_[block][static_cast<int>(site)];
    if (site_is_postln(site)) {
      const std::size_t d = value.cols();
      if (st.min.empty()) {
        st.min.assign(d, std::numeric_limits<double>::infinity());
        st.max.assign(d, -std::numeric_limits<double>::infinity());
      }
      for (std::size_t i = 0; i < value.size(); ++i) {
        const std::size_t c = i % d;
        st.min[c] = std::min(st.min[c], value[i]);
        st.max[c] = std::max(st.max[c], value[i]);
      }
      return;
    }
    if (st.min.empty()) {
      st.min.assign(1, std::numeric_limits<double>::infinity());
      st.max.assign(1, -std::numeric_limits<double>::infinity());
    }
    for (double v : value.values()) {
      st.min[0] = std::min(st.min[0], v);
      st.max[0] = std::max(st.max[0], v);
    }
    if (site == Site::kSoftmax) {
      auto& count = seen_[block];
      for (double v : value.values()) {
        if (count % stride_ == 0 && st.sample.size() < kSoftmaxSampleCap)
          st.sample.push_back(v);
        ++count;
      }
    }
  }

  std::vector<std::array<SiteStats, kSiteCount>> stats_;

 private:
  std::vector<std::size_t> seen_;
  std::size_t stride_;
};

Quantizer fit_softmax_site(const SiteStats& st, QuantKind kind, int bits) {
  Tensor sample({std::max<std::size_t>(1, st.sample.size())});
  for (std::size_t i = 0; i < st.sample.size(); ++i) sample[i] = st.sample[i];
  switch (kind) {
    case QuantKind::kUniform:
      return uq_calibrate_minmax(st.min[0], st.max[0], bits);
    case QuantKind::kLog2:
      return log_calibrate(sample, bits, LogBase::kTwo);
    case QuantKind::kLogSqrt2:
      return log_calibrate(sample, bits, LogBase::kSqrtTwo);
    case QuantKind::kSulq:
      return sulq_calibrate(sample, bits);
    case QuantKind::kTan:
      return tanq_grid_search(sample, bits, TanSearchGrid::standard());
  }
  throw ConfigError("unknown softmax quantizer kind");
}

// Per-output-column stats of a weight matrix, stored so later scale tuning
// can recompute zero points.
SiteStats weight_stats(const Tensor& w) {
  const ChannelStats cs = channel_minmax(w, 1);
  SiteStats st;
  st.min = cs.min;
  st.max = cs.max;
  return st;
}

void fit_weight_sites(const ModelWeights& m, int bits_w, QuantPlan& plan,
                      std::vector<std::array<SiteStats, kSiteCount>>& stats) {
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const BlockWeights& b = m.blocks[l];
    const std::pair<Site, const Tensor*> sites[] = {{Site::kWQkv, &b.w_qkv},
                                                    {Site::kWO, &b.w_o},
                                                    {Site::kW1, &b.w1},
                                                    {Site::kW2, &b.w2}};
    for (const auto& [site, tensor] : sites) {
      SiteStats st = weight_stats(*tensor);
      plan.blocks[l].at(site) = uq_calibrate_minmax(st.min, st.max, bits_w, 1);
      stats[l][static_cast<int>(site)] = std::move(st);
    }
  }
}

Calibration fit_from_stats(const ModelWeights& m,
                           std::vector<std::array<SiteStats, kSiteCount>> stats,
                           const PipelineConfig& cfg) {
  Calibration cal;
  cal.stats = std::move(stats);
  cal.plan.weights_enabled = false;
  cal.plan.blocks.resize(m.blocks.size());
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& bp = cal.plan.blocks[l];
    auto& bs = cal.stats[l];
    for (Site site : {Site::kPostLn1, Site::kPostLn2}) {
      const auto& st = bs[static_cast<int>(site)];
      bp.at(site) = uq_calibrate_minmax(st.min, st.max, cfg.bits_a, 1);
    }
    for (Site site : {Site::kQ, Site::kK, Site::kV, Site::kAttnOut, Site::kGelu}) {
      const auto& st = bs[static_cast<int>(site)];
      bp.at(site) = uq_calibrate_minmax(st.min[0], st.max[0], cfg.bits_a);
    }
    bp.at(Site::kSoftmax) = fit_softmax_site(bs[static_cast<int>(Site::kSoftmax)],
                                             cfg.softmax_quantizer, cfg.bits_a);
  }
  fit_weight_sites(m, cfg.bits_w, cal.plan, cal.stats);
  return cal;
}

std::size_t softmax_stride(const ModelWeights& m, std::size_t sequences) {
  const std::size_t per_block = static_cast<std::size_t>(m.cfg.heads) *
                                static_cast<std::size_t>(m.cfg.tokens) *
                                static_cast<std::size_t>(m.cfg.tokens);
  const std::size_t total = sequences * per_block;
  return std::max<std::size_t>(1, total / kSoftmaxSampleCap);
}

}  // namespace

Calibration calibrate_model(const ModelWeights& m, const std::vector<Tensor>& corpus,
                            const PipelineConfig& cfg) {
  if (corpus.empty()) throw DomainError("calibrate_model: empty corpus");
  StatsCollector collector(static_cast<int>(m.blocks.size()),
                           softmax_stride(m, corpus.size()));
  for (const Tensor& seq : corpus) model_forward(seq, m, nullptr, &collector);
  return fit_from_stats(m, std::move(collector.stats_), cfg);
}

// -- coordinate descent ---------------------------------------------------------

namespace {

bool site_is_mlp_side(Site s) {
  return s == Site::kPostLn2 || s == Site::kGelu || s == Site::kW1 || s == Site::kW2;
}

std::int32_t clamp_zero(double z, std::int32_t qmax) {
  if (z < 0.0) return 0;
  if (z > static_cast<double>(qmax)) return qmax;
  return static_cast<std::int32_t>(z);
}

QuantParams scaled_uq(const QuantParams& cur, double factor, const SiteStats& st) {
  QuantParams p = cur;
  const std::int32_t qmax = p.qmax();
  for (std::size_t c = 0; c < p.scale.size(); ++c) {
    p.scale[c] = cur.scale[c] * factor;
    if (st.freeze_zero) continue;
    const double mn = c < st.min.size() ? st.min[c] : 0.0;
    p.zero_point[c] = clamp_zero(round_half_even(-mn / p.scale[c]), qmax);
  }
  return p;
}

struct Coordinate {
  enum Kind { kScale, kTanCurvature, kTanFocus };
  Site site;
  Kind kind;
};

// Candidate quantizer for a coordinate moved by a multiplicative factor.
// Returns nullopt when the candidate is infeasible.
std::optional<Quantizer> make_candidate(const Quantizer& cur, const Coordinate& coord,
                                        double factor, const SiteStats& st) {
  switch (coord.kind) {
    case Coordinate::kScale:
      if (const auto* uq = std::get_if<QuantParams>(&cur))
        return scaled_uq(*uq, factor, st);
      if (const auto* lg = std::get_if<LogParams>(&cur)) {
        LogParams p = *lg;
        p.scale = lg->scale * factor;
        return p;
      }
      if (const auto* sq = std::get_if<SulqParams>(&cur)) {
        SulqParams p = *sq;
        p.inner = scaled_uq(sq->inner, factor, st);
        return p;
      }
      return std::nullopt;
    case Coordinate::kTanCurvature:
    case Coordinate::kTanFocus: {
      const auto* tp = std::get_if<TanParams>(&cur);
      if (!tp) return std::nullopt;
      double a = tp->curvature, b = tp->focus;
      if (coord.kind == Coordinate::kTanCurvature) a *= factor;
      else b *= factor;
      if (!tanq_feasible(a, b)) return std::nullopt;
      Tensor sample({std::max<std::size_t>(1, st.sample.size())});
      for (std::size_t i = 0; i < st.sample.size(); ++i) sample[i] = st.sample[i];
      return tanq_calibrate(sample, a, b, tp->inner.bitwidth);
    }
  }
  return std::nullopt;
}

double coordinate_value(const Quantizer& q, const Coordinate& coord) {
  switch (coord.kind) {
    case Coordinate::kScale:
      if (const auto* uq = std::get_if<QuantParams>(&q)) return uq->scale[0];
      if (const auto* lg = std::get_if<LogParams>(&q)) return lg->scale;
      if (const auto* sq = std::get_if<SulqParams>(&q)) return sq->inner.scale[0];
      return 0.0;
    case Coordinate::kTanCurvature:
      return std::get<TanParams>(q).curvature;
    case Coordinate::kTanFocus:
      return std::get<TanParams>(q).focus;
  }
  return 0.0;
}

BlockWeights bake_weights(const BlockWeights& w, const BlockPlan& bp, bool enabled,
                          const Site* override_site, const Quantizer* override_q) {
  BlockWeights baked = w;
  if (!enabled) return baked;
  const std::pair<Site, Tensor*> sites[] = {{Site::kWQkv, &baked.w_qkv},
                                            {Site::kWO, &baked.w_o},
                                            {Site::kW1, &baked.w1},
                                            {Site::kW2, &baked.w2}};
  for (const auto& [site, tensor] : sites) {
    const Quantizer* q = nullptr;
    if (override_site && *override_site == site) q = override_q;
    else if (bp.at(site)) q = &*bp.at(site);
    if (q) *tensor = fake_quant(*tensor, *q);
  }
  return baked;
}

BlockPlan activation_view(const BlockPlan& bp) {
  BlockPlan act = bp;
  for (int i = 0; i < kSiteCount; ++i) {
    if (site_is_weight(static_cast<Site>(i))) act.sites[i].reset();
  }
  return act;
}

// Loss evaluator for one block with pre-baked weights and an optional cached
// MSA half (valid while no MSA-side parameter moves).
class BlockEvaluator {
 public:
  BlockEvaluator(const BlockRecord& rec, bool weights_enabled)
      : rec_(rec), weights_enabled_(weights_enabled) {}

  void sync(const BlockPlan& bp) {
    plan_ = bp;
    baked_ = bake_weights(*rec_.weights, plan_, weights_enabled_, nullptr, nullptr);
    act_plan_ = activation_view(bp);
    msa_cache_.clear();
  }

  void invalidate_msa() { msa_cache_.clear(); }

  void rebake(const BlockPlan& bp, bool msa_side) {
    plan_ = bp;
    baked_ = bake_weights(*rec_.weights, plan_, weights_enabled_, nullptr, nullptr);
    if (msa_side) msa_cache_.clear();
  }

  void set_activation(Site site, const Quantizer& q) {
    plan_.at(site) = q;
    act_plan_.at(site) = q;
  }

  // Candidate loss. `coord_site` identifies the moved site; weight sites get
  // candidate-baked weights, activation sites get a plan override.
  double candidate_loss(Site coord_site, const Quantizer& q) const {
    if (site_is_weight(coord_site)) {
      const BlockWeights baked =
          bake_weights(*rec_.weights, plan_, weights_enabled_, &coord_site, &q);
      return loss_with(baked, act_plan_, !site_is_mlp_side(coord_site));
    }
    BlockPlan bp = act_plan_;
    bp.at(coord_site) = q;
    return loss_with(baked_, bp, !site_is_mlp_side(coord_site));
  }

  double current_loss() const { return loss_with(baked_, act_plan_, true); }

  void ensure_msa_cache() const {
    if (!msa_cache_.empty()) return;
    const QuantPlan view = single_block_view(act_plan_);
    msa_cache_.reserve(rec_.inputs.size());
    for (const Tensor& x : rec_.inputs) {
      ForwardCtx ctx;
      ctx.plan = &view;
      ctx.block = 0;
      const Tensor msa = msa_forward(layernorm(x, baked_.ln1), baked_, rec_.heads, ctx);
      Tensor y(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + msa[i];
      msa_cache_.push_back(std::move(y));
    }
  }

 private:
  double loss_with(const BlockWeights& baked, const BlockPlan& bp, bool full_path) const {
    const QuantPlan view = single_block_view(bp);
    double sse = 0.0;
    std::size_t elems = 0;
    if (!full_path && !msa_cache_.empty()) {
      for (std::size_t i = 0; i < rec_.inputs.size(); ++i) {
        ForwardCtx ctx;
        ctx.plan = &view;
        ctx.block = 0;
        const Tensor& y = msa_cache_[i];
        const Tensor mlp = mlp_forward(layernorm(y, baked.ln2), baked, ctx);
        const Tensor& fp = rec_.fp_outputs[i];
        for (std::size_t e = 0; e < y.size(); ++e) {
          const double d = (y[e] + mlp[e]) - fp[e];
          sse += d * d;
        }
        elems += y.size();
      }
    } else {
      for (std::size_t i = 0; i < rec_.inputs.size(); ++i) {
        ForwardCtx ctx;
        ctx.plan = &view;
        ctx.block = 0;
        const Tensor out = block_forward(rec_.inputs[i], baked, rec_.heads, ctx);
        sse += sse_of(out, rec_.fp_outputs[i]);
        elems += out.size();
      }
    }
    return std::sqrt(sse / static_cast<double>(elems));
  }

  const BlockRecord& rec_;
  bool weights_enabled_;
  BlockWeights baked_;
  BlockPlan plan_;      // full plan (weight entries included), for baking
  BlockPlan act_plan_;  // weight entries stripped, used in forwards
  mutable std::vector<Tensor> msa_cache_;
};

std::vector<double> factor_grid(double lo, double hi, int points) {
  std::vector<double> g(points);
  for (int i = 0; i < points; ++i)
    g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (points - 1));
  // Symmetric grids (hi == 1/lo) must contain the no-move candidate exactly.
  if (points % 2 == 1 && std::sqrt(lo * hi) == 1.0) g[points / 2] = 1.0;
  return g;
}

}  // namespace

ReconResult reconstruct_block(BlockRecord& rec, QuantPlan& plan,
                              std::array<SiteStats, kSiteCount>& stats,
                              const ReconConfig& rcfg, bool tune_weights,
                              bool tune_activations, int threads) {
  if (rcfg.passes < 1 || rcfg.grid_points < 3 || !(rcfg.factor_lo < rcfg.factor_hi))
    throw ConfigError("reconstruct_block: invalid search configuration");
  BlockPlan& bp = plan.blocks.at(rec.index);

  std::vector<Coordinate> coords;
  if (tune_activations) {
    for (Site site : {Site::kPostLn1, Site::kQ, Site::kK, Site::kV}) {
      if (bp.at(site)) coords.push_back({site, Coordinate::kScale});
    }
    if (bp.at(Site::kSoftmax)) {
      if (std::holds_alternative<TanParams>(*bp.at(Site::kSoftmax))) {
        coords.push_back({Site::kSoftmax, Coordinate::kTanCurvature});
        coords.push_back({Site::kSoftmax, Coordinate::kTanFocus});
      } else {
        coords.push_back({Site::kSoftmax, Coordinate::kScale});
      }
    }
    for (Site site : {Site::kAttnOut, Site::kPostLn2, Site::kGelu}) {
      if (bp.at(site)) coords.push_back({site, Coordinate::kScale});
    }
  }
  if (tune_weights && plan.weights_enabled) {
    for (Site site : {Site::kWQkv, Site::kWO, Site::kW1, Site::kW2}) {
      if (bp.at(site)) coords.push_back({site, Coordinate::kScale});
    }
  }

  BlockEvaluator eval(rec, plan.weights_enabled);
  eval.sync(bp);

  ReconResult result;
  double current = eval.current_loss();
  result.trace.push_back(current);
  if (coords.empty()) return result;

  const std::vector<double> coarse =
      factor_grid(rcfg.factor_lo, rcfg.factor_hi, rcfg.grid_points);
  const double step = std::pow(rcfg.factor_hi / rcfg.factor_lo,
                               1.0 / static_cast<double>(rcfg.grid_points - 1));

  for (int pass = 0; pass < rcfg.passes; ++pass) {
    bool improved = false;
    for (const Coordinate& coord : coords) {
      if (site_is_mlp_side(coord.site)) eval.ensure_msa_cache();
      const Quantizer cur = *bp.at(coord.site);
      const SiteStats& st = stats[static_cast<int>(coord.site)];

      auto search = [&](const std::vector<double>& grid, double& best_loss,
                        std::optional<Quantizer>& best_q, double& best_factor) {
        std::vector<double> losses(grid.size(),
                                   std::numeric_limits<double>::infinity());
        std::vector<std::optional<Quantizer>> cands(grid.size());
        parallel_for(grid.size(), threads, [&](std::size_t i) {
          cands[i] = make_candidate(cur, coord, grid[i], st);
          if (cands[i]) losses[i] = eval.candidate_loss(coord.site, *cands[i]);
        });
        for (std::size_t i = 0; i < grid.size(); ++i) {
          if (!cands[i]) continue;
          if (!best_q || losses[i] < best_loss ||
              (losses[i] == best_loss && grid[i] < best_factor)) {
            best_loss = losses[i];
            best_q = cands[i];
            best_factor = grid[i];
          }
        }
      };

      double best_loss = std::numeric_limits<double>::infinity();
      std::optional<Quantizer> best_q;
      double best_factor = 1.0;
      search(coarse, best_loss, best_q, best_factor);

      if (rcfg.refine && best_q && best_factor != 1.0) {
        const std::vector<double> fine =
            factor_grid(best_factor / step, best_factor * step, rcfg.grid_points);
        search(fine, best_loss, best_q, best_factor);
      }

      if (best_q && best_loss <= current &&
          (best_loss < current ||
           coordinate_value(*best_q, coord) < coordinate_value(cur, coord))) {
        if (best_loss < current) improved = true;
        current = best_loss;
        bp.at(coord.site) = *best_q;
        if (site_is_weight(coord.site)) {
          eval.rebake(bp, !site_is_mlp_side(coord.site));
        } else {
          eval.set_activation(coord.site, *best_q);
          if (!site_is_mlp_side(coord.site)) eval.invalidate_msa();
        }
      }
      result.trace.push_back(current);
    }
    if (!improved) break;
  }
  return result;
}

// -- runner ---------------------------------------------------------------------

namespace {

struct RunnerState {
  PipelineConfig cfg;
  ModelWeights fp_model;   // untouched reference
  ModelWeights weights;    // working copy, mutated at stage 2
  std::vector<Tensor> corpus;
  Calibration cal;
  std::vector<std::vector<Tensor>> block_inputs;   // [block][seq], FP chain
  std::vector<StageTrace> stage1, stage3;
  std::vector<MadTable> mad_tables;
  std::vector<ReparamCheck> checks;
  int threads = 1;
};

std::size_t recon_count(const RunnerState& st) {
  return std::min<std::size_t>(st.cfg.recon.max_sequences, st.corpus.size());
}

void run_calibration(RunnerState& st) {
  if (st.corpus.empty()) throw DomainError("pipeline: empty calibration corpus");
  const int blocks = static_cast<int>(st.weights.blocks.size());
  StatsCollector collector(blocks, softmax_stride(st.weights, st.corpus.size()));
  st.block_inputs.assign(blocks, {});
  for (const Tensor& seq : st.corpus) {
    Tensor x = seq;
    for (int l = 0; l < blocks; ++l) {
      st.block_inputs[l].push_back(x);
      ForwardCtx ctx;
      ctx.observer = &collector;
      ctx.block = l;
      x = block_forward(x, st.weights.blocks[l], st.weights.cfg.heads, ctx);
    }
  }
  st.cal = fit_from_stats(st.weights, std::move(collector.stats_), st.cfg);
}

// Records for one reconstruction stage. FP targets always come from the
// unmodified FP model; in quantized-input mode the inputs m are regenerated
// from the quantized predecessor chain.
BlockRecord make_record(RunnerState& st, int block, const std::vector<Tensor>& inputs) {
  BlockRecord rec;
  rec.index = block;
  rec.heads = st.weights.cfg.heads;
  rec.weights = &st.weights.blocks[block];
  rec.plan = &st.cal.plan;
  rec.inputs = inputs;
  rec.fp_outputs.reserve(inputs.size());
  for (const Tensor& x : inputs)
    rec.fp_outputs.push_back(
        block_forward(x, st.fp_model.blocks[block], st.fp_model.cfg.heads, {}));
  return rec;
}

std::vector<StageTrace> run_recon_stage(RunnerState& st, bool tune_weights,
                                        bool tune_activations) {
  const std::size_t n = recon_count(st);
  std::vector<StageTrace> traces;
  std::vector<Tensor> chain;
  if (st.cfg.quantized_input_recon) {
    chain.assign(st.block_inputs[0].begin(), st.block_inputs[0].begin() + n);
  }
  for (std::size_t l = 0; l < st.weights.blocks.size(); ++l) {
    std::vector<Tensor> inputs;
    if (st.cfg.quantized_input_recon) {
      inputs = chain;
    } else {
      inputs.assign(st.block_inputs[l].begin(), st.block_inputs[l].begin() + n);
    }
    BlockRecord rec = make_record(st, static_cast<int>(l), inputs);
    ReconResult res =
        reconstruct_block(rec, st.cal.plan, st.cal.stats[l], st.cfg.recon,
                          tune_weights, tune_activations, st.threads);
    traces.push_back({static_cast<int>(l), std::move(res.trace)});
    if (st.cfg.quantized_input_recon && l + 1 < st.weights.blocks.size()) {
      std::vector<Tensor> next;
      next.reserve(chain.size());
      for (const Tensor& x : chain) {
        ForwardCtx ctx;
        ctx.plan = &st.cal.plan;
        ctx.block = static_cast<int>(l);
        next.push_back(block_forward(x, st.weights.blocks[l], rec.heads, ctx));
      }
      chain = std::move(next);
    }
  }
  return traces;
}

Tensor stack_normalized(const std::vector<Tensor>& inputs, std::size_t count) {
  const std::size_t n = inputs[0].rows(), d = inputs[0].cols();
  LayerNormAffine identity;
  identity.gamma.assign(d, 1.0);
  identity.beta.assign(d, 0.0);
  Tensor out({count * n, d});
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor norm = layernorm(inputs[i], identity);
    std::copy(norm.data(), norm.data() + norm.size(), out.data() + i * norm.size());
  }
  return out;
}

void reparam_site(RunnerState& st, int block, Site site, ScaleSelect select) {
  BlockWeights& bw = st.weights.blocks[block];
  LayerNormAffine& ln = site == Site::kPostLn1 ? bw.ln1 : bw.ln2;
  Tensor& w = site == Site::kPostLn1 ? bw.w_qkv : bw.w1;
  std::vector<double>& bias = site == Site::kPostLn1 ? bw.b_qkv : bw.b1;

  auto& slot = st.cal.plan.blocks[block].at(site);
  const auto* cur = std::get_if<QuantParams>(&*slot);
  if (!cur || cur->granularity != Granularity::kChannel)
    throw InternalError("reparam: post-LN site is not channel-wise");

  const auto [s_tilde, z_tilde] = select == ScaleSelect::kMedian
                                      ? mosf_select(cur->scale, cur->zero_point)
                                      : repq_select(cur->scale, cur->zero_point);
  const ReparamBundle bundle =
      ReparamBundle::make(cur->scale, cur->zero_point, s_tilde, z_tilde);

  MadTable mad;
  mad.block = block;
  mad.site = site_name(site);
  mad.rows = score_candidates(cur->scale);
  mad.s_tilde = s_tilde;
  mad.z_tilde = z_tilde;
  mad.channel_scale = cur->scale;
  mad.channel_zero = cur->zero_point;
  st.mad_tables.push_back(std::move(mad));

  const std::size_t n = recon_count(st);
  std::vector<Tensor> before;
  before.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ForwardCtx ctx;
    ctx.plan = &st.cal.plan;
    ctx.block = block;
    before.push_back(
        block_forward(st.block_inputs[block][i], bw, st.weights.cfg.heads, ctx));
  }

  const Tensor normalized = stack_normalized(st.block_inputs[block], n);
  LinearLayer next;
  next.weight = w;
  next.bias = bias;
  const EquivalenceReport eq =
      verify_equivalence(ln, next, bundle, normalized, st.cfg.bits_a);

  auto [ln_rep, next_rep] = reparameterize(ln, next, bundle);
  ln = std::move(ln_rep);
  w = std::move(next_rep.weight);
  bias = std::move(next_rep.bias);

  QuantParams shared;
  shared.bitwidth = st.cfg.bits_a;
  shared.granularity = Granularity::kLayer;
  shared.scale = {s_tilde};
  shared.zero_point = {z_tilde};
  *slot = shared;

  // Refresh the site statistics from the reparameterized activations so
  // later scale tuning recomputes zero points against the right minimum.
  double mn = std::numeric_limits<double>::infinity(), mx = -mn;
  for (const Tensor& x : st.block_inputs[block]) {
    const Tensor act = layernorm(x, ln);
    for (double v : act.values()) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
  }
  auto& stats = st.cal.stats[block][static_cast<int>(site)];
  stats.min = {mn};
  stats.max = {mx};
  stats.sample.clear();
  stats.freeze_zero = true;

  if (st.cfg.recalibrate_after_reparam)
    *slot = uq_calibrate_minmax(mn, mx, st.cfg.bits_a);

  ReparamCheck check;
  check.block = block;
  check.site = site_name(site);
  check.code_agreement = eq.code_agreement;
  check.codes_identical = eq.code_agreement == 1.0;
  check.fp_out_max_rel_delta = eq.fp_out_max_rel_delta;
  check.quant_out_max_rel_delta = eq.quant_out_max_rel_delta;

  double block_delta = 0.0;
  if (!st.cfg.recalibrate_after_reparam) {
    for (std::size_t i = 0; i < n; ++i) {
      ForwardCtx ctx;
      ctx.plan = &st.cal.plan;
      ctx.block = block;
      const Tensor after =
          block_forward(st.block_inputs[block][i], bw, st.weights.cfg.heads, ctx);
      for (std::size_t e = 0; e < after.size(); ++e) {
        const double denom = std::max(1.0, std::abs(before[i][e]));
        block_delta = std::max(block_delta, std::abs(after[e] - before[i][e]) / denom);
      }
    }
  }
  check.block_out_max_rel_delta = block_delta;
  st.checks.push_back(check);
}

void run_stage2(RunnerState& st, ScaleSelect select) {
  for (std::size_t l = 0; l < st.weights.blocks.size(); ++l) {
    reparam_site(st, static_cast<int>(l), Site::kPostLn1, select);
    reparam_site(st, static_cast<int>(l), Site::kPostLn2, select);
  }
}

void run_stage3(RunnerState& st) {
  fit_weight_sites(st.weights, st.cfg.bits_w, st.cal.plan, st.cal.stats);
  st.cal.plan.weights_enabled = true;
  st.stage3 = run_recon_stage(st, true, st.cfg.stage3_tune_activations);
}

RunReport make_report(RunnerState& st) {
  RunReport r;
  r.bits_w = st.cfg.bits_w;
  r.bits_a = st.cfg.bits_a;
  r.softmax_quantizer = quant_kind_name(st.cfg.softmax_quantizer);
  r.select = st.cfg.select == ScaleSelect::kMedian ? "median" : "mean";
  r.model_seed = st.weights.cfg.seed;
  r.data_seed = st.cfg.data_seed;
  r.outlier_factor = st.cfg.outliers.factor;
  r.outlier_beta_shift = st.cfg.outliers.beta_shift;
  r.outlier_channels = st.cfg.outliers.channels_per_site;
  r.recalibrate_after_reparam = st.cfg.recalibrate_after_reparam;
  r.stage3_tune_activations = st.cfg.stage3_tune_activations;
  r.quantized_input_recon = st.cfg.quantized_input_recon;
  r.calib_sequences = st.corpus.size();
  r.eval_sequences = st.cfg.eval_sequences;
  r.stage1 = st.stage1;
  r.stage3 = st.stage3;
  r.mad_tables = st.mad_tables;
  r.reparam_checks = st.checks;

  const std::size_t blocks = st.weights.blocks.size();
  const std::uint64_t eval_seed = st.cfg.data_seed ^ 0x4556414cULL;
  const std::vector<Tensor> eval =
      make_token_corpus(st.weights.cfg, st.cfg.eval_sequences, eval_seed);

  std::vector<std::vector<double>> sse(eval.size(), std::vector<double>(blocks, 0.0));
  std::vector<char> match(eval.size(), 0);
  parallel_for(eval.size(), st.threads, [&](std::size_t i) {
    Tensor x = eval[i];
    for (std::size_t l = 0; l < blocks; ++l) {
      const Tensor fp_out =
          block_forward(x, st.fp_model.blocks[l], st.fp_model.cfg.heads, {});
      ForwardCtx ctx;
      ctx.plan = &st.cal.plan;
      ctx.block = static_cast<int>(l);
      const Tensor q_out =
          block_forward(x, st.weights.blocks[l], st.weights.cfg.heads, ctx);
      sse[i][l] = sse_of(q_out, fp_out);
      x = fp_out;
    }
    const Tensor fp_logits = model_forward(eval[i], st.fp_model, nullptr);
    const Tensor q_logits = model_forward(eval[i], st.weights, &st.cal.plan);
    match[i] = top1(fp_logits) == top1(q_logits) ? 1 : 0;
  });

  r.block_mse.assign(blocks, 0.0);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    for (std::size_t l = 0; l < blocks; ++l) r.block_mse[l] += sse[i][l];
    agree += match[i];
  }
  const double per_block_elems =
      static_cast<double>(eval.size()) *
      static_cast<double>(st.weights.cfg.tokens) *
      static_cast<double>(st.weights.cfg.dim);
  for (std::size_t l = 0; l < blocks; ++l) {
    r.block_mse[l] /= per_block_elems;
    r.block_mse_total += r.block_mse[l];
  }
  r.top1_agreement = static_cast<double>(agree) / static_cast<double>(eval.size());
  return r;
}

RunnerState make_runner(const ModelWeights& model, const std::vector<Tensor>& corpus,
                        const PipelineConfig& cfg) {
  RunnerState st;
  st.cfg = cfg;
  st.fp_model = model;
  st.weights = model;
  st.corpus = corpus;
  st.threads = resolve_threads(cfg.threads);
  return st;
}

}  // namespace

RunReport run_dopq(const ModelWeights& model, const std::vector<Tensor>& corpus,
                   const PipelineConfig& cfg) {
  RunnerState st = make_runner(model, corpus, cfg);
  run_calibration(st);
  st.stage1 = run_recon_stage(st, false, true);
  run_stage2(st, cfg.select);
  run_stage3(st);
  return make_report(st);
}

AbReport ab_compare_scaling(const ModelWeights& model, const std::vector<Tensor>& corpus,
                            PipelineConfig cfg) {
  AbReport report;
  cfg.select = ScaleSelect::kMedian;
  RunnerState shared = make_runner(model, corpus, cfg);
  run_calibration(shared);
  shared.stage1 = run_recon_stage(shared, false, true);

  {
    RunnerState median = shared;
    median.cfg.select = ScaleSelect::kMedian;
    run_stage2(median, ScaleSelect::kMedian);
    run_stage3(median);
    report.median_run = make_report(median);
  }
  {
    RunnerState mean = shared;
    mean.cfg.select = ScaleSelect::kMean;
    run_stage2(mean, ScaleSelect::kMean);
    run_stage3(mean);
    report.mean_run = make_report(mean);
  }
  report.median_leq_mean = report.median_run.block_mse_total <= report.mean_run.block_mse_total;
  return report;
}

// -- serialization ----------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

json trace_json(const std::vector<StageTrace>& traces) {
  json arr = json::array();
  for (const auto& t : traces) {
    arr.push_back({{"block", t.block},
                   {"trace", t.trace},
                   {"initial_loss", t.trace.front()},
                   {"final_loss", t.trace.back()}});
  }
  return arr;
}

}  // namespace

std::string run_report_json(const RunReport& r) {
  json j;
  j["version"] = r.version;
  j["bits_w"] = r.bits_w;
  j["bits_a"] = r.bits_a;
  j["softmax_quantizer"] = r.softmax_quantizer;
  j["select"] = r.select;
  j["model_seed"] = r.model_seed;
  j["data_seed"] = r.data_seed;
  j["outliers"] = {{"factor", r.outlier_factor},
                   {"beta_shift", r.outlier_beta_shift},
                   {"channels_per_site", r.outlier_channels}};
  j["flags"] = {{"recalibrate_after_reparam", r.recalibrate_after_reparam},
                {"stage3_tune_activations", r.stage3_tune_activations},
                {"quantized_input_recon", r.quantized_input_recon}};
  j["calib_sequences"] = r.calib_sequences;
  j["eval_sequences"] = r.eval_sequences;
  j["stage1"] = trace_json(r.stage1);
  j["stage3"] = trace_json(r.stage3);

  json mads = json::array();
  for (const auto& m : r.mad_tables) {
    json rows = json::array();
    for (const auto& row : m.rows)
      rows.push_back({{"statistic", row.statistic}, {"value", row.value}, {"mad", row.mad}});
    mads.push_back({{"block", m.block},
                    {"site", m.site},
                    {"rows", rows},
                    {"s_tilde", m.s_tilde},
                    {"z_tilde", m.z_tilde},
                    {"channel_scale", m.channel_scale},
                    {"channel_zero", m.channel_zero}});
  }
  j["mad_tables"] = mads;

  json checks = json::array();
  for (const auto& c : r.reparam_checks) {
    checks.push_back({{"block", c.block},
                      {"site", c.site},
                      {"codes_identical", c.codes_identical},
                      {"code_agreement", c.code_agreement},
                      {"fp_out_max_rel_delta", c.fp_out_max_rel_delta},
                      {"quant_out_max_rel_delta", c.quant_out_max_rel_delta},
                      {"block_out_max_rel_delta", c.block_out_max_rel_delta}});
  }
  j["reparam_checks"] = checks;
  j["block_mse"] = r.block_mse;
  j["block_mse_total"] = r.block_mse_total;
  j["top1_agreement"] = r.top1_agreement;
  return j.dump(2) + "\n";
}

std::string blocks_csv(const RunReport& r) {
  std::ostringstream out;
  out << "block,stage,step,loss\n";
  auto emit = [&](const std::vector<StageTrace>& traces, int stage) {
    for (const auto& t : traces) {
      for (std::size_t i = 0; i < t.trace.size(); ++i)
        out << t.block << "," << stage << "," << i << "," << fmt_double(t.trace[i]) << "\n";
    }
  };
  emit(r.stage1, 1);
  emit(r.stage3, 3);
  return out.str();
}

std::string mad_tables_csv(const RunReport& r) {
  std::ostringstream out;
  out << "block,site,statistic,value,mad\n";
  for (const auto& m : r.mad_tables) {
    for (const auto& row : m.rows) {
      out << m.block << "," << m.site << "," << row.statistic << ","
          << fmt_double(row.value) << "," << fmt_double(row.mad) << "\n";
    }
  }
  return out.str();
}

std::string quant_plan_json(const QuantPlan& plan) {
  json j;
  j["weights_enabled"] = plan.weights_enabled;
  json blocks = json::array();
  for (const auto& bp : plan.blocks) {
    json sites = json::object();
    for (int i = 0; i < kSiteCount; ++i) {
      if (!bp.sites[i]) continue;
      sites[site_name(static_cast<Site>(i))] =
          json::parse(quantizer_to_json(*bp.sites[i]));
    }
    blocks.push_back(sites);
  }
  j["blocks"] = blocks;
  return j.dump(2) + "\n";
}

QuantPlan quant_plan_from_json(const std::string& text) {
  const json j = json::parse(text);
  QuantPlan plan;
  plan.weights_enabled = j.at("weights_enabled").get<bool>();
  for (const auto& sites : j.at("blocks")) {
    BlockPlan bp;
    for (int i = 0; i < kSiteCount; ++i) {
      const char* name = site_name(static_cast<Site>(i));
      if (sites.contains(name))
        bp.sites[i] = quantizer_from_json(sites.at(name).dump());
    }
    plan.blocks.push_back(std::move(bp));
  }
  return plan;
}

std::string ab_report_json(const AbReport& r) {
  json j;
  j["median"] = json::parse(run_report_json(r.median_run));
  j["mean"] = json::parse(run_report_json(r.mean_run));
  j["median_block_mse_total"] = r.median_run.block_mse_total;
  j["mean_block_mse_total"] = r.mean_run.block_mse_total;
  j["median_leq_mean"] = r.median_leq_mean;
  return j.dump(2) + "\n";
}

}  // namespace dopq
