#pragma once

// Labeled text corpora: TSV ingestion/export, a synthetic generator with
// controllable class overlap, and the stratified subsampling used by the
// data-efficiency sweep.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "clbench/rng.hpp"

namespace clbench {

enum class Split { Train, Dev, Test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

struct Example {
  std::string text;
  int label = 0;

  bool operator==(const Example&) const = default;
};

struct LabeledCorpus {
  std::vector<Example> examples;
  std::vector<std::string> classes;
  Split split = Split::Train;

  std::size_t size() const { return examples.size(); }

  int class_id(std::string_view name) const {
    auto it = std::find(classes.begin(), classes.end(), name);
    return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(e.label);
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes.size(), 0);
    for (const auto& e : examples) ++counts[static_cast<std::size_t>(e.label)];
    return counts;
  }
};

/// Train/dev/test splits sharing one class catalog.
struct Dataset {
  std::string name = "task";
  LabeledCorpus train, dev, test;

  const std::vector<std::string>& classes() const { return train.classes; }

  /// Merges the three catalogs (train order first, then unseen dev/test
  /// classes by first appearance) and remaps labels accordingly.
  static Dataset from_splits(std::string name, LabeledCorpus train, LabeledCorpus dev, LabeledCorpus test) {
    std::vector<std::string> catalog = train.classes;
    auto remap = [&catalog](LabeledCorpus& c) {
      std::vector<int> mapping(c.classes.size());
      for (std::size_t i = 0; i < c.classes.size(); ++i) {
        auto it = std::find(catalog.begin(), catalog.end(), c.classes[i]);
        if (it == catalog.end()) {
          catalog.push_back(c.classes[i]);
          it = catalog.end() - 1;
        }
        mapping[i] = static_cast<int>(it - catalog.begin());
      }
      for (auto& e : c.examples) e.label = mapping[static_cast<std::size_t>(e.label)];
    };
    remap(dev);
    remap(test);
    Dataset d;
    d.name = std::move(name);
    d.train = std::move(train);
    d.dev = std::move(dev);
    d.test = std::move(test);
    d.train.split = Split::Train;
    d.dev.split = Split::Dev;
    d.test.split = Split::Test;
    d.train.classes = d.dev.classes = d.test.classes = catalog;
    return d;
  }
};

// ---------------------------------------------------------------------------
// TSV

struct MalformedLine {
  std::size_t line = 0;  // 1-based
  std::string reason;
  std::string content;
};

struct IngestResult {
  LabeledCorpus corpus;
  std::vector<MalformedLine> malformed;
};

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n\v\f";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline bool is_header(std::string_view label, std::string_view text) {
  auto lower = [](std::string_view s) {
    std::string out(s);
    for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return out;
  };
  return lower(trim(label)) == "label" && lower(trim(text)) == "text";
}

}  // namespace detail

/// Reads `label<TAB>text` lines. `#` lines and blank lines are skipped; an
/// optional `label<TAB>text` header is accepted once at the top. Bad lines
/// are reported, never silently dropped. Class ids follow first appearance.
inline IngestResult ingest(std::istream& in, Split split = Split::Train) {
  IngestResult result;
  result.corpus.split = split;
  std::string line;
  std::size_t line_no = 0;
  bool seen_data = false;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      result.malformed.push_back({line_no, "missing TAB separator", line});
      continue;
    }
    std::string_view label = detail::trim(std::string_view(line).substr(0, tab));
    std::string_view text = detail::trim(std::string_view(line).substr(tab + 1));
    if (detail::is_header(label, text)) {
      if (seen_header || seen_data) {
        result.malformed.push_back({line_no, "duplicate header", line});
      }
      seen_header = true;
      continue;
    }
    if (label.empty()) {
      result.malformed.push_back({line_no, "empty label", line});
      continue;
    }
    if (text.empty()) {
      result.malformed.push_back({line_no, "empty text", line});
      continue;
    }
    int id = result.corpus.class_id(label);
    if (id < 0) {
      id = static_cast<int>(result.corpus.classes.size());
      result.corpus.classes.emplace_back(label);
    }
    result.corpus.examples.push_back({std::string(text), id});
    seen_data = true;
  }
  if (result.corpus.examples.empty()) throw IngestError("ingest: no valid lines");
  return result;
}

inline IngestResult ingest_file(const std::string& path, Split split = Split::Train) {
  std::ifstream in(path);
  if (!in) throw IngestError("ingest: cannot open " + path);
  try {
    return ingest(in, split);
  } catch (const IngestError& e) {
    throw IngestError(std::string(e.what()) + " in " + path);
  }
}

/// Writes the corpus back as `label<TAB>text`. Line breaks and tabs inside a
/// text are folded into spaces.
inline void export_tsv(const LabeledCorpus& corpus, std::ostream& out) {
  for (const auto& e : corpus.examples) {
    std::string text = e.text;
    std::replace_if(text.begin(), text.end(), [](char c) { return c == '\n' || c == '\t' || c == '\r'; }, ' ');
    out << corpus.classes.at(static_cast<std::size_t>(e.label)) << '\t' << text << '\n';
  }
}

inline void export_tsv_file(const LabeledCorpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export: cannot open " + path);
  export_tsv(corpus, out);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SynthConfig {
  std::size_t classes = 3;
  std::size_t size = 600;
  std::uint64_t seed = 0;
  /// 0: class vocabularies are disjoint; 1: every token comes from the shared
  /// pool, so classes have identical distributions.
  double difficulty = 0.5;
  std::size_t tokens_per_class = 24;
  std::size_t shared_tokens = 48;
  std::size_t min_words = 6;
  std::size_t max_words = 12;
  std::string name = "synthetic";
};

/// Class-conditional bag-of-tokens text. Each word is drawn from the shared
/// pool with probability `difficulty`, otherwise from the class's own
/// vocabulary. Labels are balanced; splits are stratified 80/10/10.
inline Dataset synth_corpus(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw std::invalid_argument("synth_corpus: need at least 2 classes");
  if (!(cfg.difficulty >= 0.0 && cfg.difficulty <= 1.0))
    throw std::invalid_argument("synth_corpus: difficulty must be in [0, 1]");
  if (cfg.min_words == 0 || cfg.max_words < cfg.min_words)
    throw std::invalid_argument("synth_corpus: invalid sentence length range");
  if (cfg.tokens_per_class == 0 || cfg.shared_tokens == 0)
    throw std::invalid_argument("synth_corpus: token pools must be non-empty");

  std::vector<std::size_t> per_class(cfg.classes, cfg.size / cfg.classes);
  for (std::size_t c = 0; c < cfg.size % cfg.classes; ++c) ++per_class[c];
  std::vector<std::size_t> train_n(cfg.classes), dev_n(cfg.classes), test_n(cfg.classes);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    dev_n[c] = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(per_class[c])));
    test_n[c] = dev_n[c];
    train_n[c] = per_class[c] - dev_n[c] - test_n[c];
    if (dev_n[c] == 0 || test_n[c] == 0 || train_n[c] == 0)
      throw std::invalid_argument("synth_corpus: size " + std::to_string(cfg.size) +
                                  " too small for a stratified 80/10/10 split over " + std::to_string(cfg.classes) +
                                  " classes");
  }

  Rng rng(cfg.seed);
  std::vector<std::string> classes;
  for (std::size_t c = 0; c < cfg.classes; ++c) classes.push_back("class_" + std::to_string(c));

  auto sentence = [&](std::size_t c) {
    const std::size_t words = cfg.min_words + rng.index(cfg.max_words - cfg.min_words + 1);
    std::string text;
    for (std::size_t w = 0; w < words; ++w) {
      if (w) text += ' ';
      if (rng.bernoulli(cfg.difficulty))
        text += "s" + std::to_string(rng.index(cfg.shared_tokens));
      else
        text += "k" + std::to_string(c) + "w" + std::to_string(rng.index(cfg.tokens_per_class));
    }
    return text;
  };

  Dataset d;
  d.name = cfg.name;
  for (auto* split : {&d.train, &d.dev, &d.test}) split->classes = classes;
  d.train.split = Split::Train;
  d.dev.split = Split::Dev;
  d.test.split = Split::Test;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    for (std::size_t i = 0; i < per_class[c]; ++i) {
      Example e{sentence(c), static_cast<int>(c)};
      auto& target = i < train_n[c] ? d.train : (i < train_n[c] + dev_n[c] ? d.dev : d.test);
      target.examples.push_back(std::move(e));
    }
  }
  for (auto* split : {&d.train, &d.dev, &d.test}) std::shuffle(split->examples.begin(), split->examples.end(), rng.engine());
  return d;
}

// ---------------------------------------------------------------------------
// Subsampling

/// Order in which examples enter a stratified subsample: classes are
/// shuffled internally and interleaved proportionally, so every prefix holds
/// each class within one example of its proportional share, and prefixes of
/// increasing length are nested.
inline std::vector<std::size_t> stratified_order(const LabeledCorpus& corpus, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(corpus.classes.size());
  for (std::size_t i = 0; i < corpus.examples.size(); ++i)
    by_class[static_cast<std::size_t>(corpus.examples[i].label)].push_back(i);
  struct Slot {
    double key;
    std::size_t cls;
    std::size_t index;
  };
  std::vector<Slot> slots;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng.engine());
    const double n = static_cast<double>(by_class[c].size());
    for (std::size_t r = 0; r < by_class[c].size(); ++r)
      slots.push_back({(static_cast<double>(r) + 0.5) / n, c, by_class[c][r]});
  }
  std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
    return a.key != b.key ? a.key < b.key : a.cls < b.cls;
  });
  std::vector<std::size_t> order;
  order.reserve(slots.size());
  for (const auto& s : slots) order.push_back(s.index);
  return order;
}

/// Stratified subsample of round(fraction * size) examples, returned in the
/// corpus's original order. Throws if a class present in the corpus would be
/// left with no examples.
inline LabeledCorpus stratified_subsample(const LabeledCorpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample: fraction must be in (0, 1]");
  auto order = stratified_order(corpus, seed);
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(corpus.size())));
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(chosen.begin(), chosen.end());
  LabeledCorpus out;
  out.classes = corpus.classes;
  out.split = corpus.split;
  for (auto i : chosen) out.examples.push_back(corpus.examples[i]);
  const auto before = corpus.class_counts();
  const auto after = out.class_counts();
  for (std::size_t c = 0; c < before.size(); ++c)
    if (before[c] > 0 && after[c] == 0)
      throw std::invalid_argument("subsample: fraction " + std::to_string(fraction) + " leaves class '" +
                                  corpus.classes[c] + "' empty");
  return out;
}

/// Uniform random subset of at most `cap` examples, original order preserved.
inline LabeledCorpus cap_size(const LabeledCorpus& corpus, std::size_t cap, std::uint64_t seed) {
  if (corpus.size() <= cap) return corpus;
  Rng rng(seed);
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  LabeledCorpus out;
  out.classes = corpus.classes;
  out.split = corpus.split;
  for (auto i : idx) out.examples.push_back(corpus.examples[i]);
  return out;
}

}  // namespace clbench
