#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "aft/model.hpp"

namespace aft {

/// Copy task over `vocab` tokens: symbols 0 .. vocab-2 and a delimiter vocab-1.
/// A sequence of length+1 tokens is prefix + delimiter + prefix with
/// prefix length length/2; inputs are the first `length` tokens, targets the
/// next-token shift, and only positions predicting the second copy carry loss.
struct CopyTask {
  std::size_t length = 32;
  std::size_t vocab = 16;

  void validate() const;
  std::size_t prefix() const noexcept { return length / 2; }
  int delimiter() const noexcept { return static_cast<int>(vocab) - 1; }
};

Batch copy_batch(const CopyTask& task, Rng& rng, std::size_t batch);

struct CopyAccuracy {
  double token = 0.0;     // fraction of copy positions predicted exactly (argmax)
  double sequence = 0.0;  // fraction of sequences whose whole copy is exact
};

/// Teacher-forced argmax accuracy on the copy half.
CopyAccuracy copy_accuracy(const Model& m, const Batch& b);

/// Raw bytes of a file. IoError naming the path when unreadable or empty.
std::vector<std::uint8_t> load_corpus(const std::filesystem::path& path);

/// Deterministic English-like text of exactly `bytes` bytes.
std::vector<std::uint8_t> synthetic_corpus(std::uint64_t seed, std::size_t bytes);

/// Random windows of length+1 bytes; every position carries loss.
Batch lm_batch(std::span<const std::uint8_t> corpus, Rng& rng, std::size_t batch, std::size_t length);

/// Evenly spaced windows covering the corpus, for deterministic evaluation.
std::vector<Batch> lm_eval_batches(std::span<const std::uint8_t> corpus, std::size_t batch, std::size_t length,
                                   std::size_t max_batches);

}  // namespace aft
