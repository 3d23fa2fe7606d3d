#include "pfsam/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <unordered_map>

#include <json.hpp>

#include "pfsam/util.hpp"

namespace pfsam::analysis {

// ---------------------------------------------------------------------------
// Sharpness
// ---------------------------------------------------------------------------

SharpnessResult power_iteration_sharpness(const diff::LossBuilder& builder,
                                          const ParameterVector& params,
                                          int max_iters, double rel_tol,
                                          std::uint64_t seed) {
  if (max_iters < 1)
    throw UsageError("power_iteration: max_iters must be >= 1");
  SharpnessResult res;

  ParameterVector v = ParameterVector::zeros_like(params);
  {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    double norm = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = normal(rng);
      norm += v[i] * v[i];
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] /= norm;
  }

  double lambda_prev = 0.0;
  bool have_prev = false;
  for (int it = 1; it <= max_iters; ++it) {
    ParameterVector hv = diff::hvp(builder, params, v);
    double hv_norm = l2_norm(hv);
    res.iterations = it;
    if (hv_norm < 1e-14) {
      res.degenerate = true;
      res.eigenvalue = 0.0;
      return res;
    }
    double lambda = dot(v, hv);  // Rayleigh quotient, ||v|| == 1
    res.eigenvalue = lambda;
    if (have_prev &&
        std::abs(lambda - lambda_prev) < rel_tol * std::abs(lambda)) {
      res.converged = true;
      return res;
    }
    lambda_prev = lambda;
    have_prev = true;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = hv[i] / hv_norm;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

void OutputSnapshot::validate() const {
  const std::size_t n = labels.size();
  if (unperturbed.rows != n)
    throw UsageError("snapshot: one likelihood row per label required");
  const std::size_t C = unperturbed.cols;
  if (C < 2) throw UsageError("snapshot: at least two classes required");
  for (std::int32_t y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw UsageError("snapshot: label out of range");
  auto check_matrix = [&](const diff::Tensor& t) {
    if (t.rows != n || t.cols != C)
      throw UsageError("snapshot: ensemble shape mismatch");
    for (std::size_t i = 0; i < t.rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < C; ++j) {
        double p = t.at(i, j);
        if (!(p >= 0.0 && p <= 1.0))
          throw UsageError("snapshot: likelihood outside [0,1]");
        sum += p;
      }
      if (!sigmoid_head && std::abs(sum - 1.0) > 1e-9)
        throw UsageError("snapshot: softmax row does not sum to 1");
    }
  };
  check_matrix(unperturbed);
  for (const auto& t : ensemble) check_matrix(t);
}

namespace {
constexpr char kSnapMagic[] = "PFSAMSNAP v1\n";

void append_matrix(std::string& blob, const diff::Tensor& t) {
  blob.append(reinterpret_cast<const char*>(t.v.data()), 8 * t.v.size());
}

diff::Tensor read_matrix(const std::string& blob, std::size_t& pos,
                         std::size_t rows, std::size_t cols,
                         const std::string& what) {
  std::size_t bytes = 8 * rows * cols;
  if (pos + bytes > blob.size())
    throw FormatError("snapshot: truncated " + what + " block");
  diff::Tensor t(rows, cols);
  std::memcpy(t.v.data(), blob.data() + pos, bytes);
  pos += bytes;
  return t;
}
}  // namespace

void save_snapshot(const OutputSnapshot& snap,
                   const std::filesystem::path& path) {
  snap.validate();
  nlohmann::json header;
  header["epoch"] = snap.epoch;
  header["n"] = snap.labels.size();
  header["C"] = snap.unperturbed.cols;
  header["ensemble"] = snap.ensemble.size();
  header["m"] = snap.m;
  header["kind"] = perturb::kind_name(snap.kind);
  header["seed"] = snap.seed;
  header["sigmoid_head"] = snap.sigmoid_head;
  header["labels"] = snap.labels;

  std::string blob = kSnapMagic;
  blob += header.dump();
  blob += '\n';
  append_matrix(blob, snap.unperturbed);
  for (const auto& t : snap.ensemble) append_matrix(blob, t);
  atomic_write_file(path, blob);
}

OutputSnapshot load_snapshot(const std::filesystem::path& path) {
  std::string blob = read_file(path);
  const std::size_t magic_len = sizeof(kSnapMagic) - 1;
  if (blob.size() < magic_len ||
      std::memcmp(blob.data(), kSnapMagic, magic_len) != 0)
    throw FormatError("snapshot: bad magic: " + path.string());
  std::size_t header_end = blob.find('\n', magic_len);
  if (header_end == std::string::npos)
    throw FormatError("snapshot: missing header line");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(
        blob.substr(magic_len, header_end - magic_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("snapshot: bad header: " + std::string(e.what()));
  }

  OutputSnapshot snap;
  std::size_t n, C, ensemble_count;
  try {
    snap.epoch = header.at("epoch").get<std::uint64_t>();
    n = header.at("n").get<std::size_t>();
    C = header.at("C").get<std::size_t>();
    ensemble_count = header.at("ensemble").get<std::size_t>();
    snap.m = header.at("m").get<std::size_t>();
    snap.kind = perturb::kind_from_name(header.at("kind").get<std::string>());
    snap.seed = header.at("seed").get<std::uint64_t>();
    snap.sigmoid_head = header.at("sigmoid_head").get<bool>();
    snap.labels = header.at("labels").get<std::vector<std::int32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("snapshot: bad header field: " + std::string(e.what()));
  }
  if (snap.labels.size() != n)
    throw FormatError("snapshot: label count does not match n");

  std::size_t pos = header_end + 1;
  snap.unperturbed = read_matrix(blob, pos, n, C, "unperturbed");
  snap.ensemble.reserve(ensemble_count);
  for (std::size_t e = 0; e < ensemble_count; ++e)
    snap.ensemble.push_back(read_matrix(blob, pos, n, C, "ensemble"));
  if (pos != blob.size())
    throw FormatError("snapshot: trailing bytes");
  snap.validate();
  return snap;
}

// ---------------------------------------------------------------------------
// Binning and plug-in mutual information (entropies in bits)
// ---------------------------------------------------------------------------

std::vector<std::uint64_t> bin_outputs(const diff::Tensor& likelihoods,
                                       double t) {
  if (!(t > 0.0 && t <= 1.0))
    throw UsageError("bin_outputs: threshold must be in (0,1]");
  if (likelihoods.cols > 62)
    throw UsageError("bin_outputs: more than 62 classes unsupported");
  std::vector<std::uint64_t> codes(likelihoods.rows, 0);
  for (std::size_t i = 0; i < likelihoods.rows; ++i) {
    std::uint64_t code = 0;
    for (std::size_t c = 0; c < likelihoods.cols; ++c)
      if (likelihoods.at(i, c) >= t) code |= (std::uint64_t{1} << c);
    codes[i] = code;
  }
  return codes;
}

CodeDist point_mass(std::uint64_t code) { return {{code, 1.0}}; }

std::vector<CodeDist> ensemble_distributions(
    const std::vector<std::vector<std::uint64_t>>& draws) {
  if (draws.empty()) throw UsageError("ensemble_distributions: no draws");
  const std::size_t n = draws[0].size();
  const double w = 1.0 / static_cast<double>(draws.size());
  std::vector<CodeDist> out(n);
  std::vector<std::uint64_t> buf;
  for (std::size_t i = 0; i < n; ++i) {
    buf.clear();
    for (const auto& draw : draws) {
      if (draw.size() != n)
        throw UsageError("ensemble_distributions: ragged draws");
      buf.push_back(draw[i]);
    }
    std::sort(buf.begin(), buf.end());
    CodeDist& d = out[i];
    for (std::size_t k = 0; k < buf.size();) {
      std::size_t j = k;
      while (j < buf.size() && buf[j] == buf[k]) ++j;
      d.emplace_back(buf[k], w * static_cast<double>(j - k));
      k = j;
    }
  }
  return out;
}

double conditional_mi(std::span<const CodeDist> dists,
                      std::span<const std::int32_t> labels) {
  if (dists.size() != labels.size())
    throw UsageError("conditional_mi: one distribution per label required");
  if (dists.empty()) throw UsageError("conditional_mi: empty input");

  std::int32_t num_classes = 0;
  for (std::int32_t y : labels) num_classes = std::max(num_classes, y + 1);

  // Class mixtures p(code | y), averaged over the samples of each class.
  std::vector<std::unordered_map<std::uint64_t, double>> mix(num_classes);
  std::vector<double> class_count(num_classes, 0.0);
  for (std::size_t i = 0; i < dists.size(); ++i) {
    class_count[labels[i]] += 1.0;
    auto& m = mix[labels[i]];
    for (const auto& [code, p] : dists[i]) m[code] += p;
  }
  for (std::int32_t y = 0; y < num_classes; ++y)
    for (auto& [code, p] : mix[y]) p /= class_count[y];

  // Mean over samples of H(p(.|x), p(.|y)) - H(p(.|x)); 0 log 0 = 0. Every
  // code of a sample appears in its class mixture, so the cross term is
  // always finite.
  double total = 0.0;
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto& m = mix[labels[i]];
    double term = 0.0;
    for (const auto& [code, p] : dists[i]) {
      if (p <= 0.0) continue;
      term += p * (std::log2(p) - std::log2(m.at(code)));
    }
    total += term;
  }
  return total / static_cast<double>(dists.size());
}

namespace {

double entropy_from_counts(const std::unordered_map<std::uint64_t, double>& h,
                           double total) {
  double e = 0.0;
  for (const auto& [_, c] : h)
    if (c > 0.0) e -= (c / total) * std::log2(c / total);
  return e;
}

}  // namespace

double target_mi(std::span<const std::uint64_t> codes,
                 std::span<const std::int32_t> labels) {
  if (codes.size() != labels.size())
    throw UsageError("target_mi: one code per label required");
  if (codes.empty()) throw UsageError("target_mi: empty input");

  std::unordered_map<std::uint64_t, double> code_hist;
  std::unordered_map<std::int32_t, std::unordered_map<std::uint64_t, double>>
      per_class;
  std::unordered_map<std::int32_t, double> class_hist;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    code_hist[codes[i]] += 1.0;
    per_class[labels[i]][codes[i]] += 1.0;
    class_hist[labels[i]] += 1.0;
  }
  const double n = static_cast<double>(codes.size());
  double h_marginal = entropy_from_counts(code_hist, n);
  double h_cond = 0.0;
  for (const auto& [y, hist] : per_class)
    h_cond += (class_hist.at(y) / n) * entropy_from_counts(hist, class_hist.at(y));
  return h_marginal - h_cond;
}

double target_mi_ensemble(const std::vector<std::vector<std::uint64_t>>& draws,
                          std::span<const std::int32_t> labels) {
  if (draws.empty()) throw UsageError("target_mi_ensemble: no draws");
  std::vector<std::uint64_t> codes;
  std::vector<std::int32_t> expanded;
  codes.reserve(draws.size() * labels.size());
  expanded.reserve(draws.size() * labels.size());
  for (const auto& draw : draws) {
    if (draw.size() != labels.size())
      throw UsageError("target_mi_ensemble: ragged draws");
    codes.insert(codes.end(), draw.begin(), draw.end());
    expanded.insert(expanded.end(), labels.begin(), labels.end());
  }
  return target_mi(codes, expanded);
}

std::vector<double> threshold_grid() {
  std::vector<double> t(kNumThresholds);
  for (std::size_t k = 0; k < kNumThresholds; ++k) {
    double r = -12.0 + 12.0 * static_cast<double>(k) /
                           static_cast<double>(kNumThresholds - 1);
    t[k] = std::pow(10.0, r);
  }
  t.front() = 1e-12;
  t.back() = 1.0;
  return t;
}

SnapshotCurves mi_curve(const OutputSnapshot& snap) {
  snap.validate();
  SnapshotCurves out;
  std::vector<double> grid = threshold_grid();
  out.unperturbed.thresholds = grid;
  out.perturbed.thresholds = grid;

  auto clamp = [](double x) { return x < 0.0 ? 0.0 : x; };

  for (double t : grid) {
    std::vector<std::uint64_t> codes = bin_outputs(snap.unperturbed, t);
    std::vector<CodeDist> dists(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) dists[i] = point_mass(codes[i]);
    out.unperturbed.i_x_yhat_given_y.push_back(
        clamp(conditional_mi(dists, snap.labels)));
    out.unperturbed.i_yhat_y.push_back(clamp(target_mi(codes, snap.labels)));

    if (snap.ensemble.empty()) {
      out.perturbed.i_x_yhat_given_y.push_back(
          out.unperturbed.i_x_yhat_given_y.back());
      out.perturbed.i_yhat_y.push_back(out.unperturbed.i_yhat_y.back());
    } else {
      std::vector<std::vector<std::uint64_t>> draws;
      draws.reserve(snap.ensemble.size());
      for (const auto& mat : snap.ensemble)
        draws.push_back(bin_outputs(mat, t));
      out.perturbed.i_x_yhat_given_y.push_back(
          clamp(conditional_mi(ensemble_distributions(draws), snap.labels)));
      out.perturbed.i_yhat_y.push_back(
          clamp(target_mi_ensemble(draws, snap.labels)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adjusted thresholds
// ---------------------------------------------------------------------------

namespace {

// Linear interpolation of (xs, ys) at x, where xs is increasing.
double interp(const std::vector<double>& xs, const std::vector<double>& ys,
              double x) {
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  auto it = std::upper_bound(xs.begin(), xs.end(), x);
  std::size_t hi = static_cast<std::size_t>(it - xs.begin());
  std::size_t lo = hi - 1;
  double f = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + f * (ys[hi] - ys[lo]);
}

}  // namespace

AdjustedCurves adjust_thresholds(const SnapshotCurves& curves,
                                 std::size_t num_levels) {
  const MICurve& ref = curves.unperturbed;
  const std::size_t K = ref.thresholds.size();
  if (K < 2 || ref.i_x_yhat_given_y.size() != K)
    throw UsageError("adjust_thresholds: malformed reference curve");
  if (num_levels < 2)
    throw UsageError("adjust_thresholds: need at least two levels");

  std::size_t argmax = 0;
  double max_value = ref.i_x_yhat_given_y[0];
  for (std::size_t k = 1; k < K; ++k) {
    if (ref.i_x_yhat_given_y[k] > max_value) {
      max_value = ref.i_x_yhat_given_y[k];
      argmax = k;
    }
  }
  if (!(max_value > 0.0))
    throw UsageError("adjust_thresholds: curve maximum is zero, empty grid");

  // Decreasing branch, normalized and forced monotone (running minimum
  // absorbs estimator wiggles so the inverse is well defined).
  std::vector<double> branch_t(ref.thresholds.begin() + argmax,
                               ref.thresholds.end());
  std::vector<double> branch_v;
  branch_v.reserve(K - argmax);
  double running = 1.0;
  for (std::size_t k = argmax; k < K; ++k) {
    running = std::min(running, ref.i_x_yhat_given_y[k] / max_value);
    branch_v.push_back(running);
  }

  AdjustedCurves out;
  out.norm_constant = max_value;
  for (std::size_t j = 0; j < num_levels; ++j) {
    double s = static_cast<double>(j) / static_cast<double>(num_levels - 1);
    double target = 1.0 - s;
    double t;
    double resampled;
    if (target >= branch_v.front()) {
      t = branch_t.front();
      resampled = branch_v.front();
    } else {
      // First crossing: smallest index whose envelope value is <= target.
      std::size_t hi = 1;
      while (hi < branch_v.size() && branch_v[hi] > target) ++hi;
      if (hi == branch_v.size()) {
        // The tail stops short of the target; clamp to the last threshold.
        t = branch_t.back();
        resampled = branch_v.back();
      } else {
        std::size_t lo = hi - 1;
        double f = (branch_v[lo] - target) / (branch_v[lo] - branch_v[hi]);
        t = branch_t[lo] + f * (branch_t[hi] - branch_t[lo]);
        resampled = target;
      }
    }
    out.levels.push_back(s);
    out.thresholds.push_back(t);
    out.unpert_cond.push_back(resampled);
  }

  const double inv_norm = 1.0 / max_value;
  for (double t : out.thresholds) {
    out.pert_cond.push_back(
        inv_norm * interp(curves.perturbed.thresholds,
                          curves.perturbed.i_x_yhat_given_y, t));
    out.unpert_target.push_back(
        inv_norm * interp(ref.thresholds, ref.i_yhat_y, t));
    out.pert_target.push_back(
        inv_norm *
        interp(curves.perturbed.thresholds, curves.perturbed.i_yhat_y, t));
  }
  return out;
}

ForgettingScores forgetting_scores(std::span<const double> levels_a,
                                   std::span<const double> cond_a,
                                   std::span<const double> target_a,
                                   std::span<const double> levels_b,
                                   std::span<const double> cond_b,
                                   std::span<const double> target_b) {
  if (levels_a.size() != levels_b.size())
    throw UsageError("forgetting_scores: adjusted grids differ in size");
  for (std::size_t i = 0; i < levels_a.size(); ++i)
    if (levels_a[i] != levels_b[i])
      throw UsageError("forgetting_scores: adjusted grids differ");
  if (cond_a.size() != levels_a.size() || cond_b.size() != levels_a.size() ||
      target_a.size() != levels_a.size() || target_b.size() != levels_a.size())
    throw UsageError("forgetting_scores: curve lengths differ from grid");

  ForgettingScores out;
  out.levels.assign(levels_a.begin(), levels_a.end());
  for (std::size_t i = 0; i < levels_a.size(); ++i) {
    out.d_forget.push_back(cond_a[i] - cond_b[i]);
    out.d_target.push_back(target_a[i] - target_b[i]);
  }
  return out;
}

ForgettingScores forgetting_scores(const AdjustedCurves& curves) {
  return forgetting_scores(curves.levels, curves.unpert_cond,
                           curves.unpert_target, curves.levels,
                           curves.pert_cond, curves.pert_target);
}

// ---------------------------------------------------------------------------
// Kendall tau-b and permutation test
// ---------------------------------------------------------------------------

namespace {

// Inversions of y (strict) by merge sort.
std::int64_t count_inversions(std::vector<double>& y,
                              std::vector<double>& tmp, std::size_t lo,
                              std::size_t hi) {
  if (hi - lo < 2) return 0;
  std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t inv = count_inversions(y, tmp, lo, mid) +
                     count_inversions(y, tmp, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (y[j] < y[i]) {
      inv += static_cast<std::int64_t>(mid - i);
      tmp[k++] = y[j++];
    } else {
      tmp[k++] = y[i++];
    }
  }
  while (i < mid) tmp[k++] = y[i++];
  while (j < hi) tmp[k++] = y[j++];
  std::copy(tmp.begin() + lo, tmp.begin() + hi, y.begin() + lo);
  return inv;
}

std::int64_t tie_pairs(std::vector<double> sorted) {
  std::int64_t t = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    std::int64_t run = static_cast<std::int64_t>(j - i);
    t += run * (run - 1) / 2;
    i = j;
  }
  return t;
}

}  // namespace

std::optional<double> kendall_tau(std::span<const double> x,
                                  std::span<const double> y) {
  const std::size_t k = x.size();
  if (y.size() != k) throw UsageError("kendall_tau: length mismatch");
  if (k < 2) throw UsageError("kendall_tau: need at least two points");

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (x[a] != x[b]) return x[a] < x[b];
    return y[a] < y[b];
  });

  const std::int64_t n0 = static_cast<std::int64_t>(k) *
                          static_cast<std::int64_t>(k - 1) / 2;

  // Tie pair counts: n1 in x, n2 in y, n3 jointly.
  std::int64_t n1 = 0, n3 = 0;
  for (std::size_t i = 0; i < k;) {
    std::size_t j = i;
    while (j < k && x[order[j]] == x[order[i]]) ++j;
    std::int64_t run = static_cast<std::int64_t>(j - i);
    n1 += run * (run - 1) / 2;
    for (std::size_t a = i; a < j;) {
      std::size_t b = a;
      while (b < j && y[order[b]] == y[order[a]]) ++b;
      std::int64_t jr = static_cast<std::int64_t>(b - a);
      n3 += jr * (jr - 1) / 2;
      a = b;
    }
    i = j;
  }
  std::vector<double> ys(k);
  for (std::size_t i = 0; i < k; ++i) ys[i] = y[i];
  std::sort(ys.begin(), ys.end());
  std::int64_t n2 = tie_pairs(ys);

  if (n0 == n1 || n0 == n2) return std::nullopt;  // all tied in x or y

  // y in x-sorted order (ties in x pre-sorted by y, so in-group pairs never
  // count as inversions); inversions are exactly the discordant pairs.
  std::vector<double> yseq(k), tmp(k);
  for (std::size_t i = 0; i < k; ++i) yseq[i] = y[order[i]];
  std::int64_t discordant = count_inversions(yseq, tmp, 0, k);
  std::int64_t concordant = n0 - n1 - n2 + n3 - discordant;

  return static_cast<double>(concordant - discordant) /
         std::sqrt(static_cast<double>(n0 - n1) *
                   static_cast<double>(n0 - n2));
}

std::optional<double> permutation_p(std::span<const double> x,
                                    std::span<const double> y, int n_perm,
                                    std::uint64_t seed) {
  if (n_perm < 1) throw UsageError("permutation_p: n_perm must be >= 1");
  std::optional<double> tau0 = kendall_tau(x, y);
  if (!tau0) return std::nullopt;
  const double target = std::abs(*tau0);

  std::vector<double> perm(y.begin(), y.end());
  std::mt19937_64 rng(seed);
  std::int64_t hits = 0;
  for (int i = 0; i < n_perm; ++i) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::optional<double> tau = kendall_tau(x, perm);
    // A permutation cannot introduce or remove total ties.
    if (std::abs(*tau) >= target) ++hits;
  }
  return static_cast<double>(1 + hits) / static_cast<double>(n_perm + 1);
}

}  // namespace pfsam::analysis
