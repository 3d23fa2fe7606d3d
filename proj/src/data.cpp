#include "pfsam/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "pfsam/util.hpp"

namespace pfsam::data {

std::int32_t Dataset::num_classes() const {
  std::int32_t c = 0;
  for (std::int32_t label : y) c = std::max(c, label + 1);
  return c;
}

void Dataset::validate() const {
  if (y.size() != X.rows) throw UsageError("dataset: one label per row");
  for (std::int32_t label : y)
    if (label < 0) throw UsageError("dataset: negative label");
  for (double x : X.v)
    if (!std::isfinite(x)) throw UsageError("dataset: non-finite feature");
}

void SpuriousConfig::validate() const {
  if (n_train == 0 || n_test == 0)
    throw ConfigError("spurious: split sizes must be positive");
  if (core_dim == 0 || spurious_dim == 0)
    throw ConfigError("spurious: block dims must be positive");
  if (!(margin > 0.0)) throw ConfigError("spurious: margin must be positive");
  if (!(train_correlation_q >= 0.5 && train_correlation_q <= 1.0))
    throw ConfigError("spurious: q must be in [0.5, 1]");
  if (!(noise_sigma >= 0.0))
    throw ConfigError("spurious: noise sigma must be non-negative");
}

namespace {

std::vector<double> unit_direction(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> u(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : u) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
  } while (norm < 1e-12);
  for (double& x : u) x /= norm;
  return u;
}

}  // namespace

std::pair<Dataset, Dataset> gen_spurious(const SpuriousConfig& cfg,
                                         std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::vector<double> u_core = unit_direction(cfg.core_dim, rng);
  std::vector<double> u_sp = unit_direction(cfg.spurious_dim, rng);

  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution label_coin(0.5);

  auto make_split = [&](std::size_t n, bool train, const char* tag) {
    Dataset ds;
    ds.split = tag;
    ds.X = diff::Tensor(n, cfg.core_dim + cfg.spurious_dim);
    ds.y.resize(n);
    std::bernoulli_distribution agree(cfg.train_correlation_q);
    for (std::size_t i = 0; i < n; ++i) {
      int label = label_coin(rng) ? 1 : 0;
      double y_pm = label == 1 ? 1.0 : -1.0;
      ds.y[i] = label;
      double s_pm;
      if (train) {
        s_pm = agree(rng) ? y_pm : -y_pm;
      } else {
        s_pm = label_coin(rng) ? 1.0 : -1.0;
      }
      for (std::size_t j = 0; j < cfg.core_dim; ++j)
        ds.X.at(i, j) =
            y_pm * cfg.margin * u_core[j] + cfg.noise_sigma * normal(rng);
      for (std::size_t j = 0; j < cfg.spurious_dim; ++j)
        ds.X.at(i, cfg.core_dim + j) =
            s_pm * cfg.margin * u_sp[j] + cfg.noise_sigma * normal(rng);
    }
    return ds;
  };

  Dataset train = make_split(cfg.n_train, true, "train");
  Dataset test = make_split(cfg.n_test, false, "test");
  return {std::move(train), std::move(test)};
}

Dataset gen_gaussians(std::size_t n, std::size_t d, std::size_t num_classes,
                      double separation, std::uint64_t seed) {
  if (n == 0) throw ConfigError("gaussians: n must be positive");
  if (num_classes < 2) throw ConfigError("gaussians: need at least 2 classes");
  if (d < num_classes)
    throw ConfigError("gaussians: need d >= C for simplex means");
  if (!(separation >= 0.0))
    throw ConfigError("gaussians: separation must be non-negative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset ds;
  ds.split = "train";
  ds.X = diff::Tensor(n, d);
  ds.y.resize(n);

  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::shuffle(rows.begin(), rows.end(), rng);

  for (std::size_t i = 0; i < n; ++i) {
    std::size_t row = rows[i];
    std::int32_t label = static_cast<std::int32_t>(i % num_classes);
    ds.y[row] = label;
    for (std::size_t j = 0; j < d; ++j) {
      double mean = (j == static_cast<std::size_t>(label)) ? separation : 0.0;
      ds.X.at(row, j) = mean + normal(rng);
    }
  }
  return ds;
}

Dataset load_delimited(const std::filesystem::path& path,
                       std::size_t label_column) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open: " + path.string());

  std::vector<std::vector<std::string>> cells;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    cells.push_back(std::move(fields));
  }
  if (cells.empty()) throw FormatError("empty file: " + path.string());

  auto parse_double = [](const std::string& s, std::size_t row,
                         std::size_t col) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw FormatError("unparsable field at row " + std::to_string(row + 1) +
                        ", column " + std::to_string(col + 1) + ": '" + s + "'");
    }
    while (used < s.size() && std::isspace(static_cast<unsigned char>(s[used])))
      ++used;
    if (used != s.size())
      throw FormatError("unparsable field at row " + std::to_string(row + 1) +
                        ", column " + std::to_string(col + 1) + ": '" + s + "'");
    return v;
  };

  // Header row: first row with any field that does not parse as a number.
  std::size_t first_data = 0;
  {
    bool numeric = true;
    for (const std::string& f : cells[0]) {
      try {
        std::size_t used = 0;
        std::stod(f, &used);
        if (used != f.size()) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
      if (!numeric) break;
    }
    if (!numeric) first_data = 1;
  }
  if (first_data >= cells.size())
    throw FormatError("no data rows in: " + path.string());

  const std::size_t width = cells[first_data].size();
  if (label_column >= width)
    throw ConfigError("label column " + std::to_string(label_column) +
                      " out of range for " + std::to_string(width) +
                      " columns");

  Dataset ds;
  ds.split = "file";
  const std::size_t n = cells.size() - first_data;
  ds.X = diff::Tensor(n, width - 1);
  ds.y.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = cells[first_data + r];
    if (row.size() != width)
      throw FormatError("ragged row " + std::to_string(first_data + r + 1) +
                        ": expected " + std::to_string(width) + " fields, got " +
                        std::to_string(row.size()));
    std::size_t out_col = 0;
    for (std::size_t c = 0; c < width; ++c) {
      double v = parse_double(row[c], first_data + r, c);
      if (c == label_column) {
        double rounded = std::nearbyint(v);
        if (std::abs(v - rounded) > 1e-9 || rounded < 0.0)
          throw FormatError("label at row " +
                            std::to_string(first_data + r + 1) +
                            " is not a non-negative integer");
        ds.y[r] = static_cast<std::int32_t>(rounded);
      } else {
        ds.X.at(r, out_col++) = v;
      }
    }
  }
  ds.validate();
  return ds;
}

std::vector<std::vector<std::size_t>> batch_iter(const Dataset& ds,
                                                 std::size_t batch_size,
                                                 std::uint64_t seed,
                                                 std::uint64_t epoch) {
  if (batch_size == 0) throw UsageError("batch_iter: batch_size must be >= 1");
  const std::size_t n = ds.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ epoch);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t lo = 0; lo < n; lo += batch_size) {
    std::size_t hi = std::min(lo + batch_size, n);
    batches.emplace_back(perm.begin() + lo, perm.begin() + hi);
  }
  return batches;
}

Dataset take(const Dataset& ds, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.split = ds.split;
  out.X = diff::Tensor(rows.size(), ds.dim());
  out.y.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= ds.size()) throw UsageError("take: row out of range");
    for (std::size_t j = 0; j < ds.dim(); ++j)
      out.X.at(i, j) = ds.X.at(rows[i], j);
    out.y[i] = ds.y[rows[i]];
  }
  return out;
}

void standardize(Dataset& train, Dataset& test) {
  if (train.dim() != test.dim())
    throw UsageError("standardize: feature dims differ");
  const std::size_t d = train.dim();
  const double n = static_cast<double>(train.size());
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) mean += train.X.at(i, j);
    mean /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      double dx = train.X.at(i, j) - mean;
      var += dx * dx;
    }
    double sd = std::sqrt(var / n);
    if (sd < 1e-12) sd = 1.0;
    for (std::size_t i = 0; i < train.size(); ++i)
      train.X.at(i, j) = (train.X.at(i, j) - mean) / sd;
    for (std::size_t i = 0; i < test.size(); ++i)
      test.X.at(i, j) = (test.X.at(i, j) - mean) / sd;
  }
}

}  // namespace pfsam::data
