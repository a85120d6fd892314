#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspa/container.hpp"
#include "dspa/error.hpp"
#include "dspa/tensor.hpp"

namespace dspa {

/// Hidden states of one sequence at one layer. Rows [0, prompt_len) are the
/// prompt, rows [prompt_len, T) the response.
struct ActivationTrace {
  std::string layer_tag;
  std::size_t prompt_len = 0;
  Matrix hidden;

  std::size_t token_count() const noexcept { return hidden.rows(); }
  std::size_t response_len() const noexcept { return hidden.rows() - prompt_len; }
  std::size_t d_model() const noexcept { return hidden.cols(); }

  friend bool operator==(const ActivationTrace&, const ActivationTrace&) = default;
};

inline void validate_trace(const ActivationTrace& t) {
  require(t.token_count() > 0, ErrorCode::kInvalidTrace, "trace has zero tokens");
  require(t.d_model() > 0, ErrorCode::kInvalidTrace, "trace has zero hidden width");
  require(t.prompt_len <= t.token_count(), ErrorCode::kInvalidTrace,
          "prompt length " + std::to_string(t.prompt_len) + " exceeds token count " + std::to_string(t.token_count()));
  require(t.hidden.all_finite(), ErrorCode::kNonFinite, "trace contains a non-finite hidden value");
}

inline Container to_container(const ActivationTrace& t) {
  Container c;
  c.attributes = {{"kind", "trace"},
                  {"layer_tag", t.layer_tag},
                  {"T", t.token_count()},
                  {"T_x", t.prompt_len},
                  {"d_model", t.d_model()}};
  c.tensors["hidden"] =
      Tensor{{t.token_count(), t.d_model()}, std::vector<float>(t.hidden.data().begin(), t.hidden.data().end())};
  return c;
}

inline ActivationTrace trace_from_container(const Container& c) {
  ActivationTrace t;
  std::size_t declared_tokens = 0;
  try {
    t.layer_tag = c.attributes.at("layer_tag").get<std::string>();
    declared_tokens = c.attributes.at("T").get<std::size_t>();
    t.prompt_len = c.attributes.at("T_x").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, std::string("trace metadata: ") + e.what());
  }
  const Tensor& hidden = c.tensor("hidden");
  require(hidden.shape.size() == 2, ErrorCode::kDimensionMismatch, "\"hidden\" must be a 2-d tensor");
  require(hidden.shape[0] == declared_tokens, ErrorCode::kDimensionMismatch,
          "header declares T = " + std::to_string(declared_tokens) + " but data has " +
              std::to_string(hidden.shape[0]) + " rows");
  if (c.attributes.contains("d_model"))
    require(c.attributes["d_model"].get<std::size_t>() == hidden.shape[1], ErrorCode::kDimensionMismatch,
            "header d_model disagrees with hidden tensor width");
  t.hidden = Matrix(hidden.shape[0], hidden.shape[1], hidden.data);
  validate_trace(t);
  return t;
}

inline void write_trace(const ActivationTrace& trace, const std::filesystem::path& path) {
  validate_trace(trace);
  write_container(to_container(trace), path);
}

inline ActivationTrace read_trace(const std::filesystem::path& path) {
  return trace_from_container(read_container(path));
}

struct PreferenceTriple {
  std::string id;
  ActivationTrace prompt;    // input layer, prompt only
  ActivationTrace chosen;    // output layer, prompt + chosen response
  ActivationTrace rejected;  // output layer, prompt + rejected response
};

/// Checks the response pair of a triple: equal prompt lengths, non-empty
/// responses, matching widths.
inline void validate_responses(const std::string& id, const ActivationTrace& chosen, const ActivationTrace& rejected) {
  auto bad = [&](const std::string& why) { fail(ErrorCode::kInvalidTriple, "triple \"" + id + "\": " + why); };
  if (chosen.prompt_len != rejected.prompt_len)
    bad("chosen and rejected prompt lengths differ (" + std::to_string(chosen.prompt_len) + " vs " +
        std::to_string(rejected.prompt_len) + ")");
  if (chosen.response_len() == 0) bad("chosen response region is empty");
  if (rejected.response_len() == 0) bad("rejected response region is empty");
  if (chosen.d_model() != rejected.d_model()) bad("chosen and rejected hidden widths differ");
}

inline void validate_triple(const PreferenceTriple& t) {
  if (t.prompt.prompt_len != t.prompt.token_count())
    fail(ErrorCode::kInvalidTriple, "triple \"" + t.id + "\": prompt trace must be prompt-only (T_x = T)");
  validate_responses(t.id, t.chosen, t.rejected);
}

/// One manifest row: trace paths for a triple, resolved against the
/// manifest's directory.
struct TripleRecord {
  std::string id;
  std::filesystem::path prompt;
  std::filesystem::path chosen;
  std::filesystem::path rejected;
};

inline std::vector<TripleRecord> read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorCode::kIo, "cannot open manifest " + manifest_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, "manifest: " + std::string(e.what()));
  }
  require(doc.is_array(), ErrorCode::kMalformedMetadata, "manifest must be a JSON array");
  const auto base = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  std::vector<TripleRecord> records;
  records.reserve(doc.size());
  for (const auto& row : doc) {
    try {
      records.push_back({row.at("triple_id").get<std::string>(), resolve(row.at("prompt").get<std::string>()),
                         resolve(row.at("chosen").get<std::string>()),
                         resolve(row.at("rejected").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kMalformedMetadata, "manifest row: " + std::string(e.what()));
    }
  }
  return records;
}

/// Paths are written as given; relative paths are resolved against the
/// manifest's directory when read back.
inline void write_manifest(const std::vector<TripleRecord>& records, const std::filesystem::path& manifest_path) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& r : records)
    doc.push_back({{"triple_id", r.id},
                   {"prompt", r.prompt.generic_string()},
                   {"chosen", r.chosen.generic_string()},
                   {"rejected", r.rejected.generic_string()}});
  std::ofstream out(manifest_path);
  if (!out) fail(ErrorCode::kIo, "cannot write manifest " + manifest_path.string());
  out << doc.dump(2) << '\n';
}

inline PreferenceTriple load_triple(const TripleRecord& record) {
  auto load = [&](const std::filesystem::path& p) {
    if (!std::filesystem::exists(p))
      fail(ErrorCode::kIo, "triple \"" + record.id + "\": missing file " + p.string());
    try {
      return read_trace(p);
    } catch (const Error& e) {
      throw Error(e.code(), "triple \"" + record.id + "\" (" + p.string() + "): " + e.what());
    }
  };
  PreferenceTriple t{record.id, load(record.prompt), load(record.chosen), load(record.rejected)};
  validate_triple(t);
  return t;
}

inline std::vector<PreferenceTriple> load_triples(const std::filesystem::path& manifest_path) {
  std::vector<PreferenceTriple> triples;
  for (const auto& r : read_manifest(manifest_path)) triples.push_back(load_triple(r));
  return triples;
}

}  // namespace dspa
