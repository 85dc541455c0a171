#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "cotforge/corpus.hpp"
#include "cotforge/errors.hpp"

using namespace cotforge;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cotforge_test_corpus_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GrammarSpec small_grammar(int C, int S) {
  std::vector<std::string> names;
  std::vector<std::vector<TokenSequence>> templates;
  std::vector<TokenSequence> chains;
  for (int c = 0; c < C; ++c) {
    names.push_back("cond" + std::to_string(c));
    std::vector<TokenSequence> rows;
    for (int s = 0; s < S; ++s)
      rows.push_back({"finding" + std::to_string(c), "variant" + std::to_string(s), "."});
    templates.push_back(rows);
    chains.push_back({"look", "at", "cond" + std::to_string(c)});
  }
  return make_grammar("small", names, templates, chains);
}

}  // namespace

TEST_CASE("tokenize lowercases and splits punctuation") {
  CHECK(tokenize("The cat, sat.") == TokenSequence{"the", "cat", ",", "sat", "."});
  CHECK(tokenize("").empty());
  CHECK(tokenize("A  B") == TokenSequence{"a", "b"});
  CHECK(tokenize("x(y);z:w!v?") ==
        TokenSequence{"x", "(", "y", ")", ";", "z", ":", "w", "!", "v", "?"});
  CHECK(tokenize("  \t\n ").empty());
}

TEST_CASE("tokenize is idempotent on its joined output") {
  for (const char* s : {"Heart size is normal.", "No effusion; lungs (bilateral) clear!",
                        "a,b,,c", "MIXED Case   spacing"}) {
    const auto once = tokenize(s);
    CHECK(tokenize(detokenize(once)) == once);
  }
}

TEST_CASE("strict tagged output parsing") {
  auto ok = parse_tagged_output("<think>x</think><answer>y</answer>");
  REQUIRE(ok);
  CHECK(ok->think == "x");
  CHECK(ok->answer == "y");
  CHECK(parse_tagged_output("  <think> a </think>\n<answer>b</answer>  "));
  CHECK_FALSE(parse_tagged_output("<answer>y</answer><think>x</think>"));
  CHECK_FALSE(parse_tagged_output("<think>x</think>"));
  CHECK_FALSE(parse_tagged_output("<think>x</think><answer>y</answer>tail"));
  CHECK_FALSE(parse_tagged_output("lead<think>x</think><answer>y</answer>"));
  CHECK_FALSE(parse_tagged_output("<think>x</think><answer>y</answer><answer>z</answer>"));
  CHECK_FALSE(parse_tagged_output("<think>x<think>z</think><answer>y</answer>"));
  CHECK_FALSE(parse_tagged_output("<think>x<answer>y</think></answer>"));
  CHECK_FALSE(parse_tagged_output("<think>x</think>junk<answer>y</answer>"));
  CHECK_FALSE(parse_tagged_output(""));
}

TEST_CASE("compose then parse is the identity for tag-free strings") {
  std::mt19937_64 rng(3);
  const std::string alphabet = "ab <>/.,x\n";
  for (int k = 0; k < 200; ++k) {
    std::string think, answer;
    for (int i = 0; i < 12; ++i) think += alphabet[rng() % alphabet.size()];
    for (int i = 0; i < 12; ++i) answer += alphabet[rng() % alphabet.size()];
    const auto parsed = parse_tagged_output(compose_tagged_output(think, answer));
    REQUIRE(parsed);
    CHECK(parsed->think == think);
    CHECK(parsed->answer == answer);
  }
}

TEST_CASE("vocabulary reserves the special tokens") {
  const auto v = Vocabulary::from_words({"zeta", "alpha", "alpha"});
  CHECK(v.size() == Vocabulary::kReservedCount + 2);
  CHECK(v.token(Vocabulary::kBosId) == kBos);
  CHECK(v.token(Vocabulary::kEosId) == kEos);
  CHECK(v.token(Vocabulary::kThinkOpenId) == kThinkOpen);
  CHECK(v.token(Vocabulary::kAnswerCloseId) == kAnswerClose);
  CHECK(v.id("alpha") == Vocabulary::kReservedCount);
  CHECK(v.decode(v.encode({"zeta", "alpha"})) == TokenSequence{"zeta", "alpha"});
  CHECK_THROWS_AS(v.id("missing"), InvalidArgument);
}

TEST_CASE("built-in grammars are valid and share a vocabulary") {
  const auto d = default_grammar();
  const auto x = cross_grammar();
  CHECK_NOTHROW(d.validate());
  CHECK_NOTHROW(x.validate());
  CHECK(d.condition_count() == x.condition_count());
  CHECK(d.vocabulary.tokens() == x.vocabulary.tokens());
  CHECK(d.hash() != x.hash());
  for (int c = 0; c < d.condition_count(); ++c)
    for (int s = 0; s < d.paraphrase_count(); ++s)
      CHECK(d.templates[c][s] != x.templates[c][s]);
}

TEST_CASE("grammar JSON round trip keeps the hash") {
  const auto dir = temp_dir("grammar");
  const auto g = default_grammar();
  save_grammar(dir / "g.json", g);
  const auto back = load_grammar((dir / "g.json").string());
  CHECK(back.hash() == g.hash());
  CHECK(back.templates == g.templates);
}

TEST_CASE("synthetic dataset covers every condition and is deterministic") {
  const auto g = small_grammar(4, 3);
  const auto a = generate_synthetic_dataset(g, 7, 12, Split::kSft);
  const auto b = generate_synthetic_dataset(g, 7, 12, Split::kSft);
  REQUIRE(a.sft.size() == 12);
  CHECK(a.sft == b.sft);
  std::set<int> conds;
  for (const auto& r : a.sft) conds.insert(r.context.condition_id);
  CHECK(conds.size() == 4);
  for (const auto& r : a.sft) CHECK(r.report == g.report(r.context));
  CHECK_THROWS_AS(generate_synthetic_dataset(g, 7, 0, Split::kSft), InvalidArgument);
}

TEST_CASE("eval split is disjoint in noise id from training splits") {
  const auto g = small_grammar(4, 3);
  std::set<int> train, eval;
  for (const auto& r : generate_synthetic_dataset(g, 1, 40, Split::kSft).sft)
    train.insert(r.context.noise_id);
  for (const auto& r : generate_synthetic_dataset(g, 1, 40, Split::kRft).rft)
    train.insert(r.context.noise_id);
  for (const auto& r : generate_synthetic_dataset(g, 1, 40, Split::kEval).sft)
    eval.insert(r.context.noise_id);
  for (int n : eval) CHECK(train.count(n) == 0);
}

TEST_CASE("zero conditions are rejected") {
  GrammarSpec empty;
  CHECK_THROWS(generate_synthetic_dataset(empty, 1, 3, Split::kSft));
}

TEST_CASE("JSONL round trip for every record type") {
  const auto dir = temp_dir("jsonl");
  const auto g = default_grammar();
  const auto sft = generate_synthetic_dataset(g, 5, 20, Split::kSft).sft;
  const auto rft = generate_synthetic_dataset(g, 5, 20, Split::kRft).rft;
  persist_records(dir / "sft.jsonl", sft);
  persist_records(dir / "rft.jsonl", rft);
  CHECK(load_sft_records(dir / "sft.jsonl") == sft);
  CHECK(load_rft_records(dir / "rft.jsonl") == rft);

  std::mt19937_64 rng(9);
  std::vector<CotRecord> cots;
  for (int i = 0; i < 10; ++i) {
    CotRecord c;
    c.context = {static_cast<int>(rng() % 6), static_cast<int>(rng() % 3)};
    c.chain = "chain \"quoted\" line\nnext " + std::to_string(i);
    c.answer = {"a", std::to_string(rng() % 100), "."};
    c.trace = {{"init", "raw <think>x</think>"}, {"explore", "second"}};
    c.verified_score = static_cast<double>(rng() % 1000) / 997.0;
    cots.push_back(c);
  }
  persist_records(dir / "cot.jsonl", cots);
  CHECK(load_cot_records(dir / "cot.jsonl") == cots);
}

TEST_CASE("JSONL loader names the line and the missing field") {
  const auto dir = temp_dir("bad");
  write_file(dir / "bad.jsonl",
             "{\"condition_id\":0,\"noise_id\":0,\"prompt\":\"p\",\"report\":[\"a\"]}\n"
             "{\"condition_id\":0,\"noise_id\":0,\"prompt\":\"p\"}\n");
  try {
    load_sft_records(dir / "bad.jsonl");
    FAIL("expected an error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("report") != std::string::npos);
  }
  write_file(dir / "empty.jsonl", "");
  CHECK(load_sft_records(dir / "empty.jsonl").empty());
}

TEST_CASE("describe_context names ids and the condition") {
  const auto g = default_grammar();
  const auto s = describe_context(g, {1, 2});
  CHECK(s.find("condition_id=1") != std::string::npos);
  CHECK(s.find("noise_id=2") != std::string::npos);
  CHECK(s.find(g.condition_names[1]) != std::string::npos);
}
