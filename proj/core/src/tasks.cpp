#include "aft/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "aft/errors.hpp"

namespace aft {

void CopyTask::validate() const {
  if (length < 2 || length % 2 != 0) throw ConfigError("copy task length must be even and at least 2");
  if (vocab < 3) throw ConfigError("copy task needs a vocabulary of at least 3 (two symbols and a delimiter)");
}

Batch copy_batch(const CopyTask& task, Rng& rng, std::size_t batch) {
  task.validate();
  const std::size_t T = task.length, P = task.prefix();
  Batch b;
  b.batch = batch;
  b.length = T;
  b.inputs.resize(batch * T);
  b.targets.resize(batch * T);
  b.weight.assign(batch * T, 0.0);
  std::vector<int> seq(T + 1);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < P; ++j) seq[j] = static_cast<int>(rng.below(task.vocab - 1));
    seq[P] = task.delimiter();
    for (std::size_t j = 0; j < P; ++j) seq[P + 1 + j] = seq[j];
    for (std::size_t t = 0; t < T; ++t) {
      b.inputs[i * T + t] = seq[t];
      b.targets[i * T + t] = seq[t + 1];
      if (t >= P) b.weight[i * T + t] = 1.0;
    }
  }
  return b;
}

CopyAccuracy copy_accuracy(const Model& m, const Batch& b) {
  const Tensor logits = model_forward(m, b.inputs, b.batch, b.length, nullptr, false).logits;
  const std::size_t V = logits.dim(1);
  std::size_t hits = 0, total = 0, exact = 0;
  for (std::size_t i = 0; i < b.batch; ++i) {
    bool all = true;
    for (std::size_t t = 0; t < b.length; ++t) {
      const std::size_t n = i * b.length + t;
      if (b.weight[n] == 0.0) continue;
      const double* row = logits.ptr() + n * V;
      const auto pred = static_cast<int>(std::max_element(row, row + V) - row);
      ++total;
      if (pred == b.targets[n]) ++hits;
      else all = false;
    }
    if (all) ++exact;
  }
  return {total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0,
          b.batch ? static_cast<double>(exact) / static_cast<double>(b.batch) : 0.0};
}

std::vector<std::uint8_t> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus '" + path.string() + "'");
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error while reading corpus '" + path.string() + "'");
  if (data.empty()) throw IoError("corpus '" + path.string() + "' is empty");
  return data;
}

namespace {

// A few hundred pronounceable words with Zipf-like frequencies, strung into
// sentences with occasional punctuation, capitals and paragraph breaks.
struct Lexicon {
  std::vector<std::string> words;
  std::vector<double> cdf;
};

Lexicon make_lexicon(Rng& rng) {
  static constexpr std::array<const char*, 20> onsets{"b", "c", "d", "f", "g", "h", "l", "m", "n", "p",
                                                      "r", "s", "t", "v", "w", "st", "th", "ch", "br", "pl"};
  static constexpr std::array<const char*, 8> vowels{"a", "e", "i", "o", "u", "ea", "ou", "ai"};
  static constexpr std::array<const char*, 10> codas{"", "", "n", "r", "s", "t", "l", "nd", "ng", "ck"};
  Lexicon lex;
  for (const char* w : {"the", "of", "and", "a", "to", "in", "is", "it", "that", "was"}) lex.words.emplace_back(w);
  while (lex.words.size() < 400) {
    const std::size_t syllables = 1 + rng.below(3);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += onsets[rng.below(onsets.size())];
      w += vowels[rng.below(vowels.size())];
      if (s + 1 == syllables) w += codas[rng.below(codas.size())];
    }
    lex.words.push_back(std::move(w));
  }
  double acc = 0.0;
  for (std::size_t r = 0; r < lex.words.size(); ++r) {
    acc += 1.0 / static_cast<double>(r + 1);
    lex.cdf.push_back(acc);
  }
  for (double& c : lex.cdf) c /= acc;
  return lex;
}

const std::string& pick(const Lexicon& lex, Rng& rng) {
  const double u = rng.uniform();
  const auto it = std::lower_bound(lex.cdf.begin(), lex.cdf.end(), u);
  return lex.words[std::min<std::size_t>(static_cast<std::size_t>(it - lex.cdf.begin()), lex.words.size() - 1)];
}

}  // namespace

std::vector<std::uint8_t> synthetic_corpus(std::uint64_t seed, std::size_t bytes) {
  Rng rng(seed);
  Rng words = rng.derive(1);
  const Lexicon lex = make_lexicon(words);
  std::string text;
  text.reserve(bytes + 64);
  while (text.size() < bytes) {
    const std::size_t len = 4 + rng.below(12);
    for (std::size_t i = 0; i < len; ++i) {
      std::string w = pick(lex, rng);
      if (i == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
      text += w;
      if (i + 1 < len) text += rng.uniform() < 0.08 ? ", " : " ";
    }
    const double end = rng.uniform();
    text += end < 0.8 ? ". " : end < 0.9 ? "? " : "! ";
    if (rng.uniform() < 0.1) text += "\n\n";
  }
  text.resize(bytes);
  return {text.begin(), text.end()};
}

Batch lm_batch(std::span<const std::uint8_t> corpus, Rng& rng, std::size_t batch, std::size_t length) {
  if (corpus.size() < length + 1) throw ConfigError("corpus shorter than one training window");
  Batch b;
  b.batch = batch;
  b.length = length;
  b.inputs.resize(batch * length);
  b.targets.resize(batch * length);
  b.weight.assign(batch * length, 1.0);
  const std::size_t starts = corpus.size() - length;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t o = rng.below(starts);
    for (std::size_t t = 0; t < length; ++t) {
      b.inputs[i * length + t] = corpus[o + t];
      b.targets[i * length + t] = corpus[o + t + 1];
    }
  }
  return b;
}

std::vector<Batch> lm_eval_batches(std::span<const std::uint8_t> corpus, std::size_t batch, std::size_t length,
                                   std::size_t max_batches) {
  if (corpus.size() < length + 1) throw ConfigError("evaluation corpus shorter than one window");
  const std::size_t windows = std::min((corpus.size() - 1) / length, batch * max_batches);
  const std::size_t stride = (corpus.size() - 1 - length) / std::max<std::size_t>(windows - 1, 1);
  std::vector<Batch> out;
  for (std::size_t w0 = 0; w0 < windows; w0 += batch) {
    Batch b;
    b.batch = std::min(batch, windows - w0);
    b.length = length;
    for (std::size_t i = 0; i < b.batch; ++i) {
      const std::size_t o = (w0 + i) * stride;
      for (std::size_t t = 0; t < length; ++t) {
        b.inputs.push_back(corpus[o + t]);
        b.targets.push_back(corpus[o + t + 1]);
      }
    }
    b.weight.assign(b.batch * length, 1.0);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace aft
