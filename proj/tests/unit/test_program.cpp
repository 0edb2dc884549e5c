#include "helpers.hpp"

#include "pcan/error.hpp"
#include "pcan/program.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace pcan;

namespace {

std::string one_function(const std::string &locals, const std::string &body) {
  return R"({"entry": "f", "functions": [{"name": "f", "locals": [)" + locals +
         R"(], "body": [)" + body + "]}]}";
}

} // namespace

TEST(ProgramParse, MinimalFunction) {
  const Program p = parse_program(one_function(
      R"({"name": "buf", "kind": "buffer", "size": 16},
         {"name": "n", "kind": "scalar", "size": 8, "address_taken": true})",
      R"({"op": "write", "target": "buf", "offset": 2, "bytes": "00ff"},
         {"op": "return"})"));
  ASSERT_EQ(p.entry, "f");
  const FunctionDef &f = p.function("f");
  EXPECT_EQ(f.function_id, assign_function_id("f"));
  ASSERT_EQ(f.locals.size(), 2u);
  EXPECT_TRUE(f.locals[0].is_array());
  EXPECT_EQ(f.locals[0].size_bytes, 16u);
  EXPECT_TRUE(f.locals[1].address_taken);
  EXPECT_EQ(f.buffer_count(), 1u);
  ASSERT_EQ(f.body.size(), 2u);
  const auto &w = std::get<WriteOp>(f.body[0]);
  EXPECT_EQ(w.offset, 2u);
  EXPECT_EQ(w.bytes, (std::vector<std::uint8_t>{0x00, 0xff}));
  EXPECT_TRUE(std::holds_alternative<ReturnOp>(f.body[1]));
}

TEST(ProgramParse, ExplicitFunctionIdWins) {
  const Program p = parse_program(
      R"({"entry": "f", "functions": [{"name": "f", "function_id": 4660,
          "locals": [], "body": []}]})");
  EXPECT_EQ(p.function("f").function_id, 0x1234);
}

TEST(ProgramParse, SyntaxErrorReportsLineAndColumn) {
  try {
    parse_program("{\n  \"entry\": \"f\",\n  \"functions\": [,]\n}");
    FAIL() << "expected ParseError";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_GT(e.column(), 1u);
  }
}

TEST(ProgramParse, DuplicateLocalRejected) {
  EXPECT_THROW(parse_program(one_function(
                   R"({"name": "a", "kind": "scalar", "size": 8},
                      {"name": "a", "kind": "buffer", "size": 4})",
                   "")),
               ParseError);
}

TEST(ProgramParse, DuplicateFunctionRejected) {
  EXPECT_THROW(
      parse_program(R"({"entry": "f", "functions": [
        {"name": "f", "locals": [], "body": []},
        {"name": "f", "locals": [], "body": []}]})"),
      ParseError);
}

TEST(ProgramParse, UnresolvedCallNamesTarget) {
  try {
    parse_program(one_function("", R"({"op": "call", "target": "g"})"));
    FAIL() << "expected ParseError";
  } catch (const ParseError &e) {
    EXPECT_NE(std::string(e.what()).find("unresolved call target 'g'"),
              std::string::npos);
  }
}

TEST(ProgramParse, DynamicSizeRejected) {
  EXPECT_THROW(parse_program(one_function(
                   R"({"name": "v", "kind": "buffer", "size": "dynamic"})", "")),
               DynamicAllocationError);
}

TEST(ProgramParse, SizeLimits) {
  EXPECT_THROW(parse_program(one_function(
                   R"({"name": "v", "kind": "buffer", "size": 0})", "")),
               ParseError);
  EXPECT_THROW(parse_program(one_function(
                   R"({"name": "v", "kind": "buffer", "size": 99999999999})",
                   "")),
               ParseError);
  EXPECT_THROW(parse_program(one_function(
                   R"({"name": "v", "kind": "scalar", "size": 4})", "")),
               ParseError);
  EXPECT_NO_THROW(parse_program(one_function(
      R"({"name": "v", "kind": "buffer", "size": 1048576})", "")));
}

TEST(ProgramParse, SchemaViolations) {
  EXPECT_THROW(parse_program(one_function(
                   R"({"name": "v", "kind": "buffer", "size": 4, "x": 1})", "")),
               ParseError);
  EXPECT_THROW(parse_program(one_function(
                   "", R"({"op": "write", "target": "nope", "offset": 0,
                          "bytes": "00"})")),
               ParseError);
  EXPECT_THROW(parse_program(one_function("", R"({"op": "jump"})")),
               ParseError);
  EXPECT_THROW(parse_program(R"({"entry": "g", "functions": []})"),
               ParseError);
  EXPECT_THROW(parse_program("[]"), ParseError);
}

TEST(ProgramParse, OpAfterReturnRejected) {
  EXPECT_THROW(parse_program(one_function(
                   "", R"({"op": "return"}, {"op": "return"})")),
               ParseError);
}

TEST(ProgramParse, BadHexRejected) {
  EXPECT_THROW(from_hex("abc"), ParseError);
  EXPECT_THROW(from_hex("zz"), ParseError);
  EXPECT_EQ(to_hex(from_hex("00A1ff")), "00a1ff");
}

TEST(ProgramParse, MissingFileIsConfigError) {
  EXPECT_THROW(load_program("/nonexistent/prog.json"), ConfigError);
}

class CorpusRoundTrip : public ::testing::TestWithParam<const char *> {};

TEST_P(CorpusRoundTrip, ParseSerializeIsIdentity) {
  const Program p = load_program(test::source_path(GetParam()));
  const std::string text = serialize_program(p);
  const Program again = parse_program(text);
  EXPECT_EQ(again, p);
  EXPECT_EQ(serialize_program(again), text);
}

INSTANTIATE_TEST_SUITE_P(Files, CorpusRoundTrip,
                         ::testing::Values("corpus/suite.json",
                                           "corpus/demo.json",
                                           "corpus/overflow.json"));

TEST(Corpus, CoversBufferCountsAndInterleaving) {
  const Program p = load_program(test::source_path("corpus/suite.json"));
  EXPECT_GE(p.functions.size(), 10u);
  std::set<std::size_t> buffer_counts;
  bool interleaved = false;
  for (const auto &[_, fn] : p.functions) {
    buffer_counts.insert(fn.buffer_count());
    for (std::size_t i = 1; i + 1 < fn.locals.size(); ++i)
      if (!fn.locals[i].is_array() && fn.locals[i - 1].is_array() &&
          fn.locals[i + 1].is_array())
        interleaved = true;
  }
  for (std::size_t n = 0; n <= 3; ++n)
    EXPECT_TRUE(buffer_counts.count(n)) << n << " buffers not covered";
  EXPECT_TRUE(interleaved);
}
