#include <gtest/gtest.h>

#include <random>
#include <set>

#include "fedicl/core.hpp"

using namespace fedicl;

TEST(Tokens, WhitespaceCount) {
  EXPECT_EQ(count_tokens(""), 0u);
  EXPECT_EQ(count_tokens("   "), 0u);
  EXPECT_EQ(count_tokens("one"), 1u);
  EXPECT_EQ(count_tokens("  two  words\n"), 2u);
  EXPECT_EQ(count_tokens("a\tb\nc d"), 4u);
}

TEST(Payload, RealIs64Bits) { EXPECT_EQ(payload_size(Label{Real{3.5}}), 64u); }

TEST(Payload, TextIsCappedTokenCount) {
  EXPECT_EQ(payload_size(Label{Text{"the answer is B"}}), 4u);
  std::string long_answer;
  for (int i = 0; i < 300; ++i) long_answer += "w ";
  EXPECT_EQ(payload_size(Label{Text{long_answer}}), 256u);
  EXPECT_EQ(payload_size(Label{Choice{"C"}}), 1u);
  EXPECT_EQ(payload_size(Label{Choice{}}), 0u);
}

TEST(Payload, InputSizes) {
  EXPECT_EQ(payload_size(Input{Covariate{1.0, 2.0, 3.0}}), 192u);
  EXPECT_EQ(payload_size(Input{Question{"what is two plus two", {"3", "4"}}}), 7u);
}

TEST(Ledger, RejectsNegativePayload) {
  CommLedger l;
  EXPECT_THROW(l.record(1, Direction::uplink, 1, -1, Unit::bits), ConfigError);
  EXPECT_TRUE(l.empty());
}

TEST(Ledger, TotalsPerUnitAndRound) {
  CommLedger l;
  l.record(1, Direction::downlink, 1, 10, Unit::bits);
  l.record(1, Direction::uplink, 2, 5, Unit::tokens, PayloadKind::answers);
  l.record(2, Direction::uplink, 1, 7, Unit::bits, PayloadKind::answers);
  EXPECT_EQ(l.total(Unit::bits), 17u);
  EXPECT_EQ(l.total(Unit::tokens), 5u);
  EXPECT_EQ(l.round_total(1, Unit::bits), 10u);
  EXPECT_EQ(l.totals().at(Unit::tokens), 5u);
}

TEST(Ledger, CsvRoundTripProperty) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> small(1, 20);
  std::uniform_int_distribution<std::int64_t> payload(0, 1 << 20);
  for (int trial = 0; trial < 20; ++trial) {
    CommLedger l;
    for (int i = 0; i < small(rng); ++i)
      l.record(small(rng), small(rng) % 2 ? Direction::uplink : Direction::downlink, small(rng), payload(rng),
               small(rng) % 2 ? Unit::bits : Unit::tokens);
    const std::string csv = l.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,direction,client_id,payload_units,unit");
    const CommLedger back = CommLedger::from_csv(csv);
    ASSERT_EQ(back.entries().size(), l.entries().size());
    for (std::size_t i = 0; i < l.entries().size(); ++i) {
      const auto& a = l.entries()[i];
      const auto& b = back.entries()[i];
      EXPECT_EQ(a.round, b.round);
      EXPECT_EQ(a.direction, b.direction);
      EXPECT_EQ(a.client_id, b.client_id);
      EXPECT_EQ(a.payload_units, b.payload_units);
      EXPECT_EQ(a.unit, b.unit);
    }
    EXPECT_EQ(back.to_csv(), csv);
  }
}

TEST(Ledger, CsvRejectsBadRows) {
  EXPECT_THROW(CommLedger::from_csv("h\n1,sideways,1,2,bits\n"), ConfigError);
  EXPECT_THROW(CommLedger::from_csv("h\n1,uplink,1,2\n"), ConfigError);
  EXPECT_THROW(CommLedger::from_csv("h\n1,uplink,1,2,bytes\n"), ConfigError);
}

TEST(Seeds, DeterministicAndStreamSeparated) {
  EXPECT_EQ(derive_seed(42, "partition"), derive_seed(42, "partition"));
  std::set<std::uint64_t> seen;
  for (std::uint64_t root : {0ULL, 1ULL, 42ULL})
    for (const char* s : {"partition", "init", "client-1", "client-2", "pretrain"}) seen.insert(derive_seed(root, s));
  EXPECT_EQ(seen.size(), 15u);
}

TEST(Labels, KindAndText) {
  EXPECT_EQ(kind_of(Label{Real{1.0}}), LabelKind::real);
  EXPECT_EQ(kind_of(Label{Text{"x"}}), LabelKind::text);
  EXPECT_EQ(kind_of(Label{Choice{"B"}}), LabelKind::choice);
  EXPECT_TRUE(Choice{}.abstain());
  EXPECT_EQ(label_text(Label{Choice{"B"}}), "B");
  EXPECT_THROW(real_of(Label{Text{"x"}}), ConfigError);
}

TEST(Consistency, RejectsMixedExamples) {
  std::vector<Example> ok{{Covariate{1.0, 2.0}, Real{1.0}, {}}, {Covariate{3.0, 4.0}, Real{2.0}, {}}};
  EXPECT_EQ(check_consistent(ok), 2u);
  auto bad_dim = ok;
  bad_dim.push_back({Covariate{1.0}, Real{1.0}, {}});
  EXPECT_THROW(check_consistent(bad_dim), ConfigError);
  auto bad_kind = ok;
  bad_kind.push_back({Covariate{1.0, 1.0}, Text{"a"}, {}});
  EXPECT_THROW(check_consistent(bad_kind), ConfigError);
  auto bad_input = ok;
  bad_input.push_back({Question{"q", {}}, Real{1.0}, {}});
  EXPECT_THROW(check_consistent(bad_input), ConfigError);
  auto nan = ok;
  nan.push_back({Covariate{std::nan(""), 1.0}, Real{1.0}, {}});
  EXPECT_THROW(check_consistent(nan), ConfigError);
}

TEST(Json, LabelAndInputRoundTrip) {
  for (const Label& l : {Label{Real{-2.25}}, Label{Text{"free text"}}, Label{Choice{"D"}}, Label{Choice{}}}) {
    const json j = l;
    EXPECT_EQ(j.get<Label>(), l);
  }
  for (const Input& in : {Input{Covariate{1.5, -2.0}}, Input{Question{"q?", {}}}, Input{Question{"q?", {"a", "b"}}}}) {
    const json j = in;
    EXPECT_EQ(j.get<Input>(), in);
  }
}

TEST(Json, TraceRoundTrip) {
  RoundTrace t;
  t.round = 3;
  t.per_client_answers[1] = {Real{1.0}, Real{2.0}};
  t.per_client_answers[2] = {Real{3.0}, Real{4.0}};
  t.aggregated = QuerySet{{Covariate{1.0}, Covariate{2.0}}, {Real{2.0}, Real{3.0}}, 4};
  t.theory_w = Vector::Constant(1, 0.125);
  const json j = t;
  EXPECT_EQ(json::parse(j.dump()).get<RoundTrace>(), t);
}

TEST(Json, ExampleFields) {
  const Example e = example_from_json(json::parse(R"({"question":"pick","options":["x","y"],"answer":"B","category":"c1"})"));
  EXPECT_EQ(std::get<Question>(e.input).options.size(), 2u);
  EXPECT_EQ(std::get<Choice>(e.label).option, "B");
  EXPECT_EQ(e.category, "c1");
  const Example r = example_from_json(json::parse(R"({"x":[1,2],"y":0.5})"));
  EXPECT_EQ(real_of(r.label), 0.5);
  EXPECT_EQ(example_from_json(example_to_json(e)), e);
  EXPECT_EQ(example_from_json(example_to_json(r)), r);
  EXPECT_THROW(example_from_json(json::parse(R"({"x":[1,2]})")), ConfigError);
}
