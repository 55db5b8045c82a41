#include <cmath>
#include <vector>

#include "doctest.h"

#include "dedetr/error.hpp"
#include "dedetr/eval.hpp"
#include "dedetr/rng.hpp"

using namespace dedetr;

namespace {
LabelSet labels_of(std::vector<LabelEntry> entries) {
  LabelSet l;
  l.foreground = std::move(entries);
  return l;
}
}  // namespace

TEST_CASE("precision/recall walks the example curve") {
  // two ground truths, one matched detection then one miss:
  // points (1.0, 0.5) and (0.5, 0.5)
  const std::vector<LabelSet> labels = {
      labels_of({LabelEntry{0, Box::cxcywh(0.3, 0.3, 0.2, 0.2)},
                 LabelEntry{0, Box::cxcywh(0.7, 0.7, 0.2, 0.2)}})};
  const std::vector<std::vector<Detection>> dets = {
      {{Box::cxcywh(0.3, 0.3, 0.2, 0.2), 0, 0.9},
       {Box::cxcywh(0.05, 0.05, 0.05, 0.05), 0, 0.8}}};
  const std::vector<PRPoint> pr = compute_pr(dets, labels, 0.5, 0);
  REQUIRE(pr.size() == 2);
  CHECK(pr[0].precision == doctest::Approx(1.0));
  CHECK(pr[0].recall == doctest::Approx(0.5));
  CHECK(pr[1].precision == doctest::Approx(0.5));
  CHECK(pr[1].recall == doctest::Approx(0.5));
}

TEST_CASE("ap of a single point at recall one half is 51/101") {
  CHECK(compute_ap({PRPoint{1.0, 0.5}}) == doctest::Approx(51.0 / 101.0).epsilon(1e-12));
  CHECK(compute_ap({}) == doctest::Approx(0.0));
}

TEST_CASE("perfect detections score ap 1") {
  const std::vector<LabelSet> labels = {
      labels_of({LabelEntry{0, Box::cxcywh(0.3, 0.3, 0.2, 0.2)}}),
      labels_of({LabelEntry{1, Box::cxcywh(0.6, 0.6, 0.3, 0.3)}})};
  const std::vector<std::vector<Detection>> dets = {
      {{Box::cxcywh(0.3, 0.3, 0.2, 0.2), 0, 0.9}},
      {{Box::cxcywh(0.6, 0.6, 0.3, 0.3), 1, 0.8}}};
  const EvalResult r = evaluate(dets, labels, 2);
  CHECK(r.ap == doctest::Approx(1.0));
  CHECK(r.ap50 == doctest::Approx(1.0));
  CHECK(r.ap75 == doctest::Approx(1.0));
  CHECK(r.num_images == 2);
  CHECK(r.num_gt == 2);
  CHECK(r.num_dets == 2);
}

TEST_CASE("duplicate detections cost precision") {
  const std::vector<LabelSet> labels = {
      labels_of({LabelEntry{0, Box::cxcywh(0.3, 0.3, 0.2, 0.2)},
                 LabelEntry{0, Box::cxcywh(0.7, 0.7, 0.2, 0.2)}})};
  const std::vector<std::vector<Detection>> clean = {
      {{Box::cxcywh(0.3, 0.3, 0.2, 0.2), 0, 0.9},
       {Box::cxcywh(0.7, 0.7, 0.2, 0.2), 0, 0.7}}};
  std::vector<std::vector<Detection>> dup = clean;
  dup[0].insert(dup[0].begin() + 1, {Box::cxcywh(0.3, 0.3, 0.2, 0.2), 0, 0.8});
  const double ap_clean = evaluate(clean, labels, 1).ap50;
  const double ap_dup = evaluate(dup, labels, 1).ap50;
  CHECK(ap_clean == doctest::Approx(1.0));
  CHECK(ap_dup < ap_clean);
}

TEST_CASE("classes without ground truth are skipped") {
  const std::vector<LabelSet> labels = {
      labels_of({LabelEntry{0, Box::cxcywh(0.3, 0.3, 0.2, 0.2)}})};
  const std::vector<std::vector<Detection>> dets = {
      {{Box::cxcywh(0.3, 0.3, 0.2, 0.2), 0, 0.9},
       {Box::cxcywh(0.6, 0.6, 0.2, 0.2), 1, 0.8}}};  // spurious class-1 output
  const EvalResult r = evaluate(dets, labels, 2);
  REQUIRE(r.per_class_ap.size() == 2);
  CHECK(r.per_class_ap[0] == doctest::Approx(1.0));
  CHECK(r.per_class_ap[1] == doctest::Approx(-1.0));
  CHECK(r.ap50 == doctest::Approx(1.0));  // mean over represented classes only
}

TEST_CASE("ap50 is at least the threshold-averaged ap") {
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<LabelSet> labels;
    std::vector<std::vector<Detection>> dets;
    for (int scene = 0; scene < 4; ++scene) {
      LabelSet l;
      std::vector<Detection> d;
      const int n = 1 + static_cast<int>(rng.uniform_index(3));
      for (int i = 0; i < n; ++i) {
        const Box gt = Box::cxcywh(0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform(),
                                   0.1 + 0.2 * rng.uniform(), 0.1 + 0.2 * rng.uniform());
        l.foreground.push_back(LabelEntry{static_cast<int64_t>(rng.uniform_index(2)), gt});
        Box guess = gt;
        for (int k = 0; k < 4; ++k) guess.v[k] += 0.02 * (rng.uniform() - 0.5);
        d.push_back({guess, l.foreground.back().class_id, rng.uniform()});
      }
      labels.push_back(std::move(l));
      dets.push_back(std::move(d));
    }
    const EvalResult r = evaluate(dets, labels, 2);
    CHECK(r.ap50 >= r.ap - 1e-12);
    CHECK(r.ap50 >= r.ap75 - 1e-12);
  }
}

TEST_CASE("evaluate rejects mismatched scene counts") {
  std::vector<LabelSet> labels(2);
  std::vector<std::vector<Detection>> dets(3);
  CHECK_THROWS_AS(evaluate(dets, labels, 1), ContractError);
}

TEST_CASE("ablation report aggregates mean and spread per config") {
  std::map<std::string, std::vector<EvalResult>> results;
  EvalResult a;
  a.ap = 0.2;
  a.ap50 = 0.4;
  EvalResult b;
  b.ap = 0.4;
  b.ap50 = 0.6;
  results["base"] = {a, b};
  EvalResult c;
  c.ap = 0.5;
  c.ap50 = 0.9;
  results["full"] = {c};
  const std::vector<AblationRow> rows = ablation_report(results);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].config_id == "base");
  CHECK(rows[0].runs == 2);
  CHECK(rows[0].ap_mean == doctest::Approx(0.3));
  CHECK(rows[0].ap_std == doctest::Approx(0.1));
  CHECK(rows[0].ap50_mean == doctest::Approx(0.5));
  CHECK(rows[1].config_id == "full");
  CHECK(rows[1].ap50_mean == doctest::Approx(0.9));
  const std::string table = format_ablation_table(rows);
  CHECK(table.find("base") != std::string::npos);
  CHECK(table.find("full") != std::string::npos);
}
