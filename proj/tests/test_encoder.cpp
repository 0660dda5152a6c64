#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <algorithm>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "clbench/checkpoint.hpp"
#include "clbench/encoder.hpp"
#include "clbench/objectives.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace clbench;

namespace {

using TD = Tensor<double>;

Vocabulary small_vocab() {
  const std::vector<std::string> texts{"the cat sat", "the dog sat down", "a cat ran"};
  return Vocabulary::build(texts);
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

std::vector<TokenIds> random_batch(std::size_t count, std::size_t vocab, std::size_t max_len, std::mt19937_64& gen) {
  std::uniform_int_distribution<std::size_t> len(1, max_len - 2);
  std::uniform_int_distribution<TokenId> tok(Vocabulary::kSpecialCount, vocab - 1);
  std::vector<TokenIds> out;
  for (std::size_t i = 0; i < count; ++i) {
    TokenIds ids{Vocabulary::kCls};
    const auto n = len(gen);
    for (std::size_t k = 0; k < n; ++k) ids.push_back(tok(gen));
    ids.push_back(Vocabulary::kSep);
    ids.resize(max_len, Vocabulary::kPad);
    out.push_back(std::move(ids));
  }
  return out;
}

// Parameter handles share storage with the model, so a copy can write through.
std::span<double> writable(const NamedTensor<double>& p) {
  TD handle = p.tensor;
  return handle.mutable_values();
}

Model<double> tiny_model(std::uint64_t seed, std::size_t vocab = 16, std::size_t classes = 3) {
  Rng rng(seed);
  return Model<double>(oracle::tiny_model_config(vocab, classes), rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer

TEST(Tokenize, EmptyTextIsClsSepThenPadding) {
  const auto vocab = small_vocab();
  const auto ids = vocab.tokenize("", 128);
  ASSERT_EQ(ids.size(), 128u);
  EXPECT_EQ(ids[0], Vocabulary::kCls);
  EXPECT_EQ(ids[1], Vocabulary::kSep);
  for (std::size_t i = 2; i < ids.size(); ++i) EXPECT_EQ(ids[i], Vocabulary::kPad);
}

TEST(Tokenize, LongTextTruncatesToMaxLenEndingInSep) {
  const auto vocab = small_vocab();
  std::string text;
  for (int i = 0; i < 50; ++i) text += "cat ";
  const auto ids = vocab.tokenize(text, 10);
  ASSERT_EQ(ids.size(), 10u);
  EXPECT_EQ(ids.front(), Vocabulary::kCls);
  EXPECT_EQ(ids.back(), Vocabulary::kSep);
  for (std::size_t i = 1; i + 1 < ids.size(); ++i) EXPECT_EQ(ids[i], vocab.id("cat"));
}

TEST(Tokenize, DefaultMaxLenIs128) {
  EXPECT_EQ(kDefaultMaxLen, 128u);
  EXPECT_EQ(small_vocab().tokenize("the cat").size(), 128u);
}

TEST(Tokenize, UnknownWordsMapToUnk) {
  const auto ids = small_vocab().tokenize("the zebra", 6);
  EXPECT_EQ(ids[2], Vocabulary::kUnk);
}

TEST(Tokenize, EmptyVocabularyAndTinyMaxLenAreErrors) {
  Vocabulary empty;
  EXPECT_THROW((void)empty.tokenize("x", 8), std::logic_error);
  EXPECT_THROW((void)small_vocab().tokenize("x", 2), std::invalid_argument);
}

TEST(Vocabulary, IdsDenseSpecialsDistinctAndBijective) {
  const auto vocab = small_vocab();
  std::set<TokenId> specials{Vocabulary::kPad, Vocabulary::kUnk, Vocabulary::kCls, Vocabulary::kSep};
  EXPECT_EQ(specials.size(), 4u);
  for (auto id : specials) EXPECT_LT(id, vocab.size());
  for (std::size_t i = Vocabulary::kSpecialCount; i < vocab.size(); ++i) EXPECT_EQ(vocab.id(vocab.tokens()[i]), i);
  EXPECT_EQ(vocab.size(), 4u + 7u);  // the cat sat dog down a ran
}

TEST(Vocabulary, FrequencyCapKeepsMostFrequent) {
  const std::vector<std::string> texts{"b b b a a c"};
  const auto vocab = Vocabulary::build(texts, 6);
  EXPECT_EQ(vocab.size(), 6u);
  EXPECT_EQ(vocab.tokens()[4], "b");
  EXPECT_EQ(vocab.tokens()[5], "a");
  EXPECT_EQ(vocab.id("c"), Vocabulary::kUnk);
}

// ---------------------------------------------------------------------------
// Encoder

TEST(Encode, DeterministicWithoutDropout) {
  auto model = tiny_model(1);
  std::mt19937_64 gen(1);
  const auto batch = random_batch(3, 16, 8, gen);
  Rng r1(5), r2(99);
  auto a = model.encoder().encode(std::span<const TokenIds>(batch), false, r1);
  auto b = model.encoder().encode(std::span<const TokenIds>(batch), false, r2);
  for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i].hidden.values(), b[i].hidden.values()));
}

TEST(Encode, KeepProbOneDropoutMatchesNoDropout) {
  auto cfg = oracle::tiny_model_config(16);
  cfg.encoder.keep_prob = 1.0;
  Rng init(2);
  Model<double> model(cfg, init);
  std::mt19937_64 gen(2);
  const auto batch = random_batch(3, 16, 8, gen);
  Rng r1(5), r2(5);
  auto on = model.encoder().encode(std::span<const TokenIds>(batch), true, r1);
  auto off = model.encoder().encode(std::span<const TokenIds>(batch), false, r2);
  for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_TRUE(bitwise_equal(on[i].hidden.values(), off[i].hidden.values()));
}

TEST(Encode, SameSeedSameDropoutMasks) {
  auto model = tiny_model(3);
  std::mt19937_64 gen(3);
  const auto batch = random_batch(4, 16, 8, gen);
  Rng r1(11), r2(11), r3(12);
  auto a = stack_cls<double>(model.encoder().encode(std::span<const TokenIds>(batch), true, r1));
  auto b = stack_cls<double>(model.encoder().encode(std::span<const TokenIds>(batch), true, r2));
  auto c = stack_cls<double>(model.encoder().encode(std::span<const TokenIds>(batch), true, r3));
  EXPECT_TRUE(bitwise_equal(a.values(), b.values()));
  EXPECT_FALSE(bitwise_equal(a.values(), c.values()));
}

TEST(Encode, PermutingBatchPermutesOutputs) {
  auto model = tiny_model(4);
  std::mt19937_64 gen(4);
  const auto batch = random_batch(5, 16, 8, gen);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<TokenIds> shuffled;
  for (auto p : perm) shuffled.push_back(batch[p]);
  Rng rng(0);
  auto out = model.encoder().encode(std::span<const TokenIds>(shuffled), false, rng);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto single = model.encoder().encode(std::span<const TokenId>(batch[perm[i]]), false, rng);
    EXPECT_TRUE(bitwise_equal(out[i].hidden.values(), single.hidden.values()));
  }
}

TEST(Encode, ClsIsRowZeroOfHidden) {
  auto model = tiny_model(5);
  std::mt19937_64 gen(5);
  const auto batch = random_batch(2, 16, 8, gen);
  Rng rng(0);
  for (const auto& out : model.encoder().encode(std::span<const TokenIds>(batch), true, rng)) {
    ASSERT_EQ(out.cls.rows(), 1u);
    for (std::size_t j = 0; j < out.cls.cols(); ++j) EXPECT_EQ(out.cls.at(0, j), out.hidden.at(0, j));
    EXPECT_LE(out.hidden.rows(), 8u);
  }
}

TEST(Encode, AppendedPaddingNeverChangesCls) {
  for (bool trim : {true, false}) {
    auto cfg = oracle::tiny_model_config(16);
    cfg.encoder.trim_padding = trim;
    Rng init(6);
    Model<double> model(cfg, init);
    const TokenIds base{Vocabulary::kCls, 5, 9, 7, Vocabulary::kSep};
    Rng rng(0);
    const auto ref = model.encoder().encode(std::span<const TokenId>(base), false, rng).cls;
    for (std::size_t pad = 1; pad <= 3; ++pad) {
      TokenIds padded = base;
      padded.resize(base.size() + pad, Vocabulary::kPad);
      const auto cls = model.encoder().encode(std::span<const TokenId>(padded), false, rng).cls;
      for (std::size_t j = 0; j < cls.cols(); ++j) EXPECT_NEAR(cls.at(0, j), ref.at(0, j), 1e-12) << "trim=" << trim;
    }
  }
}

TEST(Encode, OutOfRangeIdIsAnError) {
  auto model = tiny_model(7);
  const TokenIds bad{Vocabulary::kCls, 16, Vocabulary::kSep};
  Rng rng(0);
  EXPECT_THROW((void)model.encoder().encode(std::span<const TokenId>(bad), false, rng), std::out_of_range);
  const std::vector<TokenIds> none;
  EXPECT_THROW((void)model.encoder().encode(std::span<const TokenIds>(none), false, rng), std::invalid_argument);
}

TEST(EncoderConfig, HiddenMustDivideByHeads) {
  EncoderConfig cfg;
  cfg.vocab_size = 10;
  cfg.hidden = 10;
  cfg.heads = 4;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Encode, InitialParametersAreFinite) {
  auto model = tiny_model(8);
  for (const auto& p : model.parameters())
    for (double v : p.tensor.values()) EXPECT_TRUE(std::isfinite(v)) << p.name;
  EXPECT_EQ(model.classifier().weight.rows(), 3u);
}

// ---------------------------------------------------------------------------
// Heads

TEST(Classify, ZeroWeightsGiveUniformProbabilities) {
  for (std::size_t classes : {2u, 3u, 5u}) {
    auto model = tiny_model(9, 16, classes);
    auto& w = model.classifier().weight;
    std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.0);
    std::mt19937_64 gen(9);
    auto p = model.classifier().classify(oracle::random_tensor(4, 16, gen, false));
    for (double v : p.values()) EXPECT_NEAR(v, 1.0 / double(classes), 1e-15);
  }
}

TEST(Classify, MatchesSoftmaxOfMatrixVectorProduct) {
  auto model = tiny_model(10);
  std::mt19937_64 gen(10);
  auto h = oracle::random_tensor(3, 16, gen, false);
  auto p = model.classifier().classify(h);
  const auto W = oracle::rows_of(model.classifier().weight);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> logits;
    const auto row = oracle::rows_of(h)[i];
    for (const auto& wr : W) logits.push_back(oracle::dot(wr, row));
    const auto expect = oracle::softmax(logits);
    double s = 0.0;
    for (std::size_t c = 0; c < expect.size(); ++c) {
      EXPECT_NEAR(p.at(i, c), expect[c], 1e-12);
      s += p.at(i, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Project, IdentityWeightsPassNonnegativeInputThrough) {
  auto model = tiny_model(11);
  auto& proj = model.projection();
  const std::size_t d = 16;
  for (auto* w : {&proj.w1, &proj.w2}) {
    auto v = w->mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  }
  std::mt19937_64 gen(11);
  auto h = oracle::random_tensor(2, d, gen, false, 0.0, 1.0);
  auto z = proj.project(h);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(z.values()[i], h.values()[i]);
}

TEST(Project, ZeroInputGivesZeroOutput) {
  auto model = tiny_model(12);
  auto z = model.projection().project(TD::zeros(3, 16));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Project, MatchesTwoStepComputation) {
  auto model = tiny_model(13);
  std::mt19937_64 gen(13);
  auto h = oracle::random_tensor(3, 16, gen, false);
  auto z = model.projection().project(h);
  const auto W1 = oracle::rows_of(model.projection().w1), W2 = oracle::rows_of(model.projection().w2);
  const auto H = oracle::rows_of(h);
  for (std::size_t i = 0; i < H.size(); ++i) {
    std::vector<double> a;
    for (const auto& r : W1) a.push_back(std::max(0.0, oracle::dot(r, H[i])));
    for (std::size_t k = 0; k < W2.size(); ++k) EXPECT_NEAR(z.at(i, k), oracle::dot(W2[k], a), 1e-12);
  }
}

TEST(Weighting, ZeroClassifierGivesUniformRows) {
  auto model = tiny_model(14);
  for (const auto& p : model.weighting().parameters())
    if (p.name == "weighting.classifier") std::ranges::fill(writable(p), 0.0);
  std::mt19937_64 gen(14);
  const auto batch = random_batch(4, 16, 8, gen);
  Rng rng(0);
  auto w = model.weighting().confidence(std::span<const TokenIds>(batch), false, rng);
  for (double v : w.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Weighting, RowsAreSoftmaxOfLogits) {
  auto model = tiny_model(15);
  std::mt19937_64 gen(15);
  const auto batch = random_batch(5, 16, 8, gen);
  Rng r1(1), r2(1);
  auto logits = model.weighting().logits(std::span<const TokenIds>(batch), true, r1);
  auto w = model.weighting().confidence(std::span<const TokenIds>(batch), true, r2);
  const auto L = oracle::rows_of(logits);
  for (std::size_t i = 0; i < L.size(); ++i) {
    double s = 0.0, z = 0.0;
    for (double v : L[i]) z += std::exp(v);
    for (std::size_t c = 0; c < L[i].size(); ++c) {
      EXPECT_NEAR(w.at(i, c), std::exp(L[i][c]) / z, 1e-12);
      s += w.at(i, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Weighting, SmallerHiddenSizeByDefault) {
  auto model = tiny_model(16);
  EXPECT_LT(model.weighting().encoder.hidden(), model.encoder().hidden());
  EXPECT_EQ(model.weighting().head.classes(), 3u);
}

TEST(Weighting, ParameterDisjointFromMainEncoder) {
  auto model = tiny_model(17);
  const auto weighting = model.weighting().parameters();
  for (const auto& p : model.encoder().parameters())
    for (const auto& q : weighting) EXPECT_FALSE(p.tensor.same_node(q.tensor)) << p.name << " / " << q.name;

  std::mt19937_64 gen(17);
  const auto batch = random_batch(3, 16, 8, gen);
  const std::span<const TokenIds> ids(batch);
  Rng rng(0);
  const auto main_before = stack_cls<double>(model.encoder().encode(ids, false, rng));
  const auto weighting_before = model.weighting().logits(ids, false, rng);
  const auto saved = model.snapshot();
  for (const auto& q : weighting)
    for (auto& v : writable(q)) v += 0.5;
  EXPECT_TRUE(bitwise_equal(main_before.values(), stack_cls<double>(model.encoder().encode(ids, false, rng)).values()));
  model.restore(saved);
  for (const auto& p : model.encoder().parameters())
    for (auto& v : writable(p)) v *= 1.5;
  EXPECT_TRUE(bitwise_equal(weighting_before.values(), model.weighting().logits(ids, false, rng).values()));
}

// ---------------------------------------------------------------------------
// End-to-end gradient and checkpoint

TEST(EndToEnd, CrossEntropyGradientThroughEncoderMatchesFiniteDifferences) {
  auto cfg = oracle::tiny_model_config(16);
  cfg.with_weighting = false;
  cfg.encoder.keep_prob = 1.0;
  Rng init(18);
  Model<double> model(cfg, init);
  const auto batch = oracle::tiny_batch(16);
  auto loss = [&] {
    Rng rng(0);
    auto h = stack_cls<double>(model.encoder().encode(std::span<const TokenIds>(batch.ids), false, rng));
    return cross_entropy(model.classifier().classify(h), std::span<const int>(batch.labels));
  };
  backward(loss());
  double worst = 0.0;
  for (auto& p : model.parameters()) {
    if (p.name.rfind("projection", 0) == 0) continue;
    std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto numeric = oracle::numeric_gradient(writable(p), [&] { return loss().item(); });
    for (std::size_t i = 0; i < numeric.size(); ++i) worst = std::max(worst, oracle::relative_error(analytic[i], numeric[i]));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  for (int width : {4, 8}) {
    std::ostringstream first;
    const auto vocab = small_vocab();
    const std::vector<std::string> classes{"neg", "neu", "pos"};
    auto cfg = oracle::tiny_model_config(vocab.size(), 3);
    Rng init(19);
    if (width == 4) {
      Model<float> model(cfg, init);
      save_checkpoint(first, model, vocab, classes, {{"seed", 19}});
    } else {
      Model<double> model(cfg, init);
      save_checkpoint(first, model, vocab, classes, {{"seed", 19}});
    }
    std::istringstream in(first.str());
    std::ostringstream second;
    if (width == 4) {
      auto loaded = load_checkpoint<float>(in);
      save_checkpoint(second, loaded);
      EXPECT_EQ(loaded.vocab.tokens(), vocab.tokens());
      EXPECT_EQ(loaded.classes, classes);
      EXPECT_EQ(loaded.metadata.at("seed"), 19);
    } else {
      auto loaded = load_checkpoint<double>(in);
      save_checkpoint(second, loaded);
    }
    EXPECT_EQ(first.str(), second.str()) << "width " << width;
  }
}

TEST(Checkpoint, CorruptInputIsRejected) {
  std::istringstream junk("not a checkpoint at all");
  EXPECT_THROW((void)load_checkpoint<float>(junk), CheckpointError);
  std::ostringstream out;
  Rng init(20);
  Model<float> model(oracle::tiny_model_config(16), init);
  save_checkpoint(out, model, small_vocab(), {"a", "b"});
  auto bytes = out.str();
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW((void)load_checkpoint<float>(truncated), std::exception);
}
