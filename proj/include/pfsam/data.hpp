#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pfsam/tensor.hpp"

namespace pfsam::data {

struct Dataset {
  diff::Tensor X;                 // n x d
  std::vector<std::int32_t> y;    // labels in [0, C)
  std::string split;

  std::size_t size() const { return X.rows; }
  std::size_t dim() const { return X.cols; }
  std::int32_t num_classes() const;
  void validate() const;
};

// Binary task with an informative core block and a block that is predictive
// on the training split only: the spurious sign agrees with the label with
// probability q on train and is a fair coin on test.
struct SpuriousConfig {
  std::size_t n_train = 2000;
  std::size_t n_test = 2000;
  std::size_t core_dim = 8;
  std::size_t spurious_dim = 8;
  double margin = 1.0;
  double train_correlation_q = 0.95;  // in [0.5, 1]
  double noise_sigma = 0.7;

  void validate() const;
};

std::pair<Dataset, Dataset> gen_spurious(const SpuriousConfig& cfg,
                                         std::uint64_t seed);

// C isotropic Gaussians with means on scaled simplex vertices (d >= C);
// labels assigned round-robin, rows shuffled.
Dataset gen_gaussians(std::size_t n, std::size_t d, std::size_t num_classes,
                      double separation, std::uint64_t seed);

// Comma-separated numeric text, '.' decimal separator, optional single
// header row. label_column selects the label field by index.
Dataset load_delimited(const std::filesystem::path& path,
                       std::size_t label_column);

// Per-epoch seeded shuffle (seed xor epoch), contiguous batches, short final
// batch kept.
std::vector<std::vector<std::size_t>> batch_iter(const Dataset& ds,
                                                 std::size_t batch_size,
                                                 std::uint64_t seed,
                                                 std::uint64_t epoch);

Dataset take(const Dataset& ds, const std::vector<std::size_t>& rows);

// Shift/scale features to zero mean and unit variance using statistics
// computed from the training split only.
void standardize(Dataset& train, Dataset& test);

}  // namespace pfsam::data
