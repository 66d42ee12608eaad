#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "crowdloss/annotation.hpp"
#include "oracles.hpp"

using namespace crowdloss;

TEST(Majority, CountsPresentVotes) {
  const auto m = compute_majority(std::vector<int>{1, 1, 0}, 2);
  EXPECT_EQ(m.label, 1);
  EXPECT_NEAR(m.vote_fraction, 2.0 / 3.0, 1e-12);
  EXPECT_FALSE(m.tie);
}

TEST(Majority, Unanimous) {
  const auto m = compute_majority(std::vector<int>{0, 0, 0, 0}, 2);
  EXPECT_EQ(m.label, 0);
  EXPECT_DOUBLE_EQ(m.vote_fraction, 1.0);
  EXPECT_FALSE(m.tie);
}

TEST(Majority, TieGoesToLowestClass) {
  const auto m = compute_majority(std::vector<int>{1, 0}, 2);
  EXPECT_EQ(m.label, 0);
  EXPECT_DOUBLE_EQ(m.vote_fraction, 0.5);
  EXPECT_TRUE(m.tie);

  const auto m3 = compute_majority(std::vector<int>{2, 1, 2, 1}, 3);
  EXPECT_EQ(m3.label, 1);
  EXPECT_TRUE(m3.tie);
}

TEST(Majority, EmptyRowThrows) {
  EXPECT_THROW(compute_majority(std::vector<int>{}, 2), Error);
  std::vector<std::optional<int>> row(3);
  EXPECT_THROW(compute_majority(row, 2), Error);
}

TEST(Majority, SkipsMissingEntries) {
  std::vector<std::optional<int>> row{std::nullopt, 1, std::nullopt, 1, 0};
  const auto m = compute_majority(row, 2);
  EXPECT_EQ(m.label, 1);
  EXPECT_NEAR(m.vote_fraction, 2.0 / 3.0, 1e-12);
}

TEST(Majority, PermutationInvariant) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> label(0, 2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> row(1 + trial % 9);
    for (auto& v : row) v = label(rng);
    const auto ref = compute_majority(row, 3);
    std::shuffle(row.begin(), row.end(), rng);
    const auto m = compute_majority(row, 3);
    EXPECT_EQ(m.label, ref.label);
    EXPECT_EQ(m.tie, ref.tie);
    EXPECT_DOUBLE_EQ(m.vote_fraction, ref.vote_fraction);
  }
}

TEST(AnnotationVariance, HandExamples) {
  EXPECT_DOUBLE_EQ(annotation_variance(std::vector<int>{1, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(annotation_variance(std::vector<int>{1, 0}), 0.25);
  EXPECT_NEAR(annotation_variance(std::vector<int>{1, 1, 0}), 2.0 / 9.0, 1e-12);
}

TEST(AnnotationVariance, RejectsNonBinary) {
  EXPECT_THROW(annotation_variance(std::vector<int>{0, 1}, 3), Error);
  EXPECT_THROW(annotation_variance(std::vector<int>{}), Error);
}

TEST(AnnotationVariance, ExtremaAndFlipInvariance) {
  for (int n = 1; n <= 12; ++n) {
    double best = -1.0;
    int best_k = -1;
    for (int k = 0; k <= n; ++k) {
      std::vector<int> row(static_cast<std::size_t>(n), 0);
      std::fill(row.begin(), row.begin() + k, 1);
      const double v = annotation_variance(row);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 0.25);
      EXPECT_EQ(v == 0.0, k == 0 || k == n);
      std::vector<int> flipped = row;
      for (auto& l : flipped) l = 1 - l;
      EXPECT_DOUBLE_EQ(annotation_variance(flipped), v);
      if (v > best) {
        best = v;
        best_k = k;
      }
    }
    if (n % 2 == 0) {
      EXPECT_EQ(best_k, n / 2);
      EXPECT_DOUBLE_EQ(best, 0.25);
    } else {
      EXPECT_LT(best, 0.25);
    }
  }
}

TEST(AnnotationMatrix, SparseAccess) {
  AnnotationMatrix m(2, 3, 2);
  m.set(0, 2, 1);
  m.set(0, 0, 0);
  EXPECT_EQ(m.get(0, 0), 0);
  EXPECT_EQ(m.get(0, 2), 1);
  EXPECT_FALSE(m.get(0, 1).has_value());
  EXPECT_FALSE(m.get(1, 0).has_value());
  EXPECT_EQ(m.row(0).front().annotator, 0u);
  EXPECT_THROW(m.set(0, 2, 0), Error);
  EXPECT_THROW(m.set(0, 1, 2), Error);
  EXPECT_THROW(m.set(0, 3, 0), Error);
  EXPECT_THROW(m.relabel(1, 0, 1), Error);
}

namespace {

const char* kTwoLines =
    R"({"id": "a", "features": [0.5, -1], "annotations": {"x": 1, "y": 0}}
{"id": "b", "features": [2, 3.25], "annotations": {"z": 1, "x": 1}}
)";

}  // namespace

TEST(LoadDataset, ParsesAndAssignsFirstAppearanceOrder) {
  const auto d = parse_jsonl(kTwoLines);
  EXPECT_EQ(d.num_samples(), 2u);
  EXPECT_EQ(d.annotations.num_annotators(), 3u);
  EXPECT_EQ(d.annotator_ids, (std::vector<std::string>{"x", "y", "z"}));
  EXPECT_EQ(d.annotations.get(1, 2), 1);
  EXPECT_EQ(d.annotations.get(1, 0), 1);
  EXPECT_FALSE(d.annotations.get(1, 1).has_value());
  EXPECT_FALSE(d.ground_truth.has_value());
  EXPECT_EQ(d.features[0], (std::vector<double>{0.5, -1.0}));
}

TEST(LoadDataset, RejectsDuplicateAnnotator) {
  const std::string text =
      R"({"id": "a", "features": [1], "annotations": {"x": 1, "x": 0}})";
  EXPECT_THROW(parse_jsonl(text), Error);
}

TEST(LoadDataset, MalformedLineNamesLineNumber) {
  const std::string text = std::string(kTwoLines) + "{not json\n";
  try {
    parse_jsonl(text);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, RejectsUnknownClassLabel) {
  const std::string text =
      R"({"id": "a", "features": [1], "annotations": {"x": 2}})";
  EXPECT_THROW(parse_jsonl(text), Error);
  EXPECT_NO_THROW(parse_jsonl(text, 3));
  EXPECT_THROW(parse_jsonl(R"({"id": "a", "features": [1], "annotations": {"x": -1}})"),
               Error);
  EXPECT_THROW(parse_jsonl(R"({"id": "a", "features": [1], "annotations": {"x": "1"}})"),
               Error);
}

TEST(LoadDataset, RejectsDimensionMismatchAndEmptyRows) {
  EXPECT_THROW(parse_jsonl(R"({"id": "a", "features": [1], "annotations": {"x": 1}}
{"id": "b", "features": [1, 2], "annotations": {"x": 1}})"),
               Error);
  EXPECT_THROW(parse_jsonl(R"({"id": "a", "features": [1], "annotations": {}})"), Error);
  EXPECT_THROW(parse_jsonl(""), Error);
}

TEST(LoadDataset, MissingFileThrows) {
  EXPECT_THROW(load_dataset("/nonexistent/crowdloss.jsonl"), Error);
}

TEST(Validate, ValidDatasetHasNoViolations) {
  EXPECT_TRUE(validate(parse_jsonl(kTwoLines)).empty());
}

TEST(Validate, ReportsUnannotatedSampleById) {
  Dataset d = parse_jsonl(kTwoLines);
  d.features.push_back({0.0, 0.0});
  d.sample_ids.push_back("lonely");
  AnnotationMatrix m(3, 3, 2);
  for (std::size_t i = 0; i < 2; ++i)
    for (const auto& a : d.annotations.row(i)) m.set(i, a.annotator, a.label);
  d.annotations = m;
  const auto v = validate(d);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("lonely"), std::string::npos);
}

TEST(Validate, ReportsNonFiniteFeatureRow) {
  Dataset d = parse_jsonl(kTwoLines);
  d.features[1][0] = std::numeric_limits<double>::quiet_NaN();
  const auto v = validate(d);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("row 1"), std::string::npos);
}

TEST(Validate, ReportsAllViolations) {
  Dataset d = parse_jsonl(kTwoLines);
  d.features[0][0] = std::numeric_limits<double>::infinity();
  d.features[1][1] = std::numeric_limits<double>::infinity();
  d.sample_ids.pop_back();
  EXPECT_EQ(validate(d).size(), 3u);
}

TEST(Jsonl, RoundTripRandomDatasets) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 17);
    const std::size_t a = 1 + static_cast<std::size_t>(trial % 6);
    const int classes = 2 + trial % 3;
    const auto d = canonicalize_annotators(
        oracle::random_dataset(rng, n, a, 1 + trial % 5, classes, trial % 2 == 0));
    ASSERT_TRUE(validate(d).empty());
    const auto back = parse_jsonl(to_jsonl(d), classes);
    EXPECT_EQ(back, d) << "trial " << trial;
  }
}

TEST(Jsonl, LoadCanonicalizesAnnotatorOrder) {
  std::mt19937_64 rng(99);
  const auto d = oracle::random_dataset(rng, 12, 5, 3, 2, true);
  EXPECT_EQ(parse_jsonl(to_jsonl(d)), canonicalize_annotators(d));
}

TEST(MajorityDataset, SingleVirtualAnnotator) {
  const auto d = parse_jsonl(kTwoLines);
  const auto m = majority_dataset(d);
  EXPECT_EQ(m.annotations.num_annotators(), 1u);
  EXPECT_EQ(m.annotations.get(0, 0), 0);  // 1 vs 0 tie -> 0
  EXPECT_EQ(m.annotations.get(1, 0), 1);
}

TEST(SliceRows, KeepsAnnotatorsAndTruth) {
  std::mt19937_64 rng(5);
  const auto d = oracle::random_dataset(rng, 10, 4, 2, 2, true);
  const auto s = slice_rows(d, 3, 7);
  EXPECT_EQ(s.num_samples(), 4u);
  EXPECT_EQ(s.annotations.num_annotators(), 4u);
  EXPECT_EQ(s.features[0], d.features[3]);
  EXPECT_EQ(s.annotations.row(1), d.annotations.row(4));
  EXPECT_EQ((*s.ground_truth)[3], (*d.ground_truth)[6]);
}
