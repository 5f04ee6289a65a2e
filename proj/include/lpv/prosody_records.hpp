#pragma once

// JSONL prosody records shared by the corpus writer, the renderer and the
// evaluator:
//   {"utt_id": s, "pitch": [...], "voiced": [...]}
//   {"utt_id": s, "word": w, "duration": frames, "system": 1|2}
// Writers may attach "config_hash"/"corpus_hash" provenance keys.

#include "json.hpp"
#include "lpv/common.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace lpv {

struct PitchRecord {
  std::string utt_id;
  std::vector<double> pitch;
  std::vector<bool> voiced;
};

struct DurationRecord {
  std::string utt_id;
  int word = 0;
  int duration = 0;
  int system = 1;
};

struct Provenance {
  std::string config_hash;
  std::string corpus_hash;
};

struct ProsodyFile {
  std::vector<PitchRecord> pitch;
  std::vector<DurationRecord> durations;
  Provenance provenance;
};

inline void write_prosody(const std::filesystem::path& path, const ProsodyFile& file) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(path.string(), ": cannot open for writing");
  auto stamp = [&](nlohmann::json& j) {
    if (!file.provenance.config_hash.empty()) j["config_hash"] = file.provenance.config_hash;
    if (!file.provenance.corpus_hash.empty()) j["corpus_hash"] = file.provenance.corpus_hash;
  };
  for (const auto& p : file.pitch) {
    nlohmann::json j;
    j["utt_id"] = p.utt_id;
    j["pitch"] = p.pitch;
    std::vector<int> voiced(p.voiced.begin(), p.voiced.end());
    j["voiced"] = voiced;
    stamp(j);
    out << j.dump() << '\n';
  }
  for (const auto& d : file.durations) {
    nlohmann::json j;
    j["utt_id"] = d.utt_id;
    j["word"] = d.word;
    j["duration"] = d.duration;
    j["system"] = d.system;
    stamp(j);
    out << j.dump() << '\n';
  }
}

inline ProsodyFile read_prosody(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(path.string(), ": cannot open for reading");
  ProsodyFile file;
  std::string line;
  std::size_t lineno = 0;
  bool have_provenance = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail<FormatError>(path.string(), ":", lineno, ": invalid JSON: ", e.what());
    }
    auto need = [&](const char* key) -> const nlohmann::json& {
      if (!j.contains(key)) fail<FormatError>(path.string(), ":", lineno, ": missing key \"", key, "\"");
      return j.at(key);
    };
    try {
      if (j.contains("config_hash") || j.contains("corpus_hash")) {
        Provenance p{j.value("config_hash", std::string{}), j.value("corpus_hash", std::string{})};
        if (have_provenance && (p.config_hash != file.provenance.config_hash ||
                                p.corpus_hash != file.provenance.corpus_hash))
          fail<FormatError>(path.string(), ":", lineno, ": mixed provenance hashes within one file");
        file.provenance = p;
        have_provenance = true;
      }
      if (j.contains("pitch")) {
        PitchRecord r;
        r.utt_id = need("utt_id").get<std::string>();
        r.pitch = need("pitch").get<std::vector<double>>();
        for (const auto& v : need("voiced")) r.voiced.push_back(v.is_boolean() ? v.get<bool>() : v.get<int>() != 0);
        if (r.pitch.size() != r.voiced.size())
          fail<FormatError>(path.string(), ":", lineno, ": pitch/voiced length mismatch");
        file.pitch.push_back(std::move(r));
      } else {
        DurationRecord r;
        r.utt_id = need("utt_id").get<std::string>();
        r.word = need("word").get<int>();
        r.duration = need("duration").get<int>();
        r.system = need("system").get<int>();
        if (r.system != 1 && r.system != 2)
          fail<FormatError>(path.string(), ":", lineno, ": system must be 1 or 2");
        file.durations.push_back(r);
      }
    } catch (const nlohmann::json::exception& e) {
      fail<FormatError>(path.string(), ":", lineno, ": ", e.what());
    }
  }
  return file;
}

}  // namespace lpv
