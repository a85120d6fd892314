#pragma once

#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "dspa/sae.hpp"
#include "dspa/trace.hpp"

namespace dspa::fixtures {

inline constexpr const char* kInputTag = "layer_in";
inline constexpr const char* kOutputTag = "layer_out";

/// Trace from explicit rows of a d-wide hidden state.
inline ActivationTrace make_trace(const std::string& tag, std::size_t prompt_len,
                                  std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t cols = rows.size() == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return {tag, prompt_len, Matrix(rows.size(), cols, std::move(data))};
}

/// Two triples over identity 2-wide ReLU SAEs. Prompt densities are (1, 0)
/// and (1, 1), so the 75th-percentile gates are (1, 0) and (1, 1); response
/// density differences are (0.4, -0.2) and (0, 0.6). The map is
/// [[0.2, 0.2], [0, 0.3]].
inline std::vector<PreferenceTriple> toy_triples() {
  const float on = 1.0f, off = -1.0f;
  std::vector<PreferenceTriple> t;
  t.push_back({"x1",
               make_trace(kInputTag, 2, {{on, off}, {on, off}}),
               make_trace(kOutputTag, 2, {{off, off}, {off, off}, {on, off}, {on, off}, {off, off}, {off, off}, {off, off}}),
               make_trace(kOutputTag, 2, {{off, off}, {off, off}, {off, on}, {off, off}, {off, off}, {off, off}, {off, off}})});
  t.push_back({"x2",
               make_trace(kInputTag, 2, {{on, on}, {on, on}}),
               make_trace(kOutputTag, 2, {{off, off}, {off, off}, {off, on}, {off, on}, {off, on}, {off, off}, {off, off}}),
               make_trace(kOutputTag, 2, {{off, off}, {off, off}, {off, off}, {off, off}, {off, off}, {off, off}, {off, off}})});
  return t;
}

/// Prompt trace at the input layer with both toy features fully dense.
inline ActivationTrace toy_prompt() { return make_trace(kInputTag, 2, {{1.0f, 1.0f}, {1.0f, 1.0f}}); }

/// Output-layer stream: feature 0 active on tokens 0 and 2, feature 1 on
/// tokens 1 and 2, nothing on token 3.
inline ActivationTrace toy_stream() {
  return make_trace(kOutputTag, 0, {{2.0f, -1.0f}, {-1.0f, 1.5f}, {0.5f, 0.25f}, {-1.0f, -1.0f}});
}

/// Writes the toy SAEs, traces, manifest, prompt and stream into `dir`.
inline void write_toy(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto sae = SaeParams::identity(2);
  save_sae(sae, dir / "input_sae.dspa");
  save_sae(sae, dir / "output_sae.dspa");
  std::vector<TripleRecord> records;
  for (const auto& t : toy_triples()) {
    TripleRecord r{t.id, t.id + ".prompt.dspa", t.id + ".chosen.dspa", t.id + ".rejected.dspa"};
    write_trace(t.prompt, dir / r.prompt);
    write_trace(t.chosen, dir / r.chosen);
    write_trace(t.rejected, dir / r.rejected);
    records.push_back(std::move(r));
  }
  write_manifest(records, dir / "manifest.json");
  write_trace(toy_prompt(), dir / "prompt.dspa");
  write_trace(toy_stream(), dir / "stream.dspa");
}

}  // namespace dspa::fixtures
