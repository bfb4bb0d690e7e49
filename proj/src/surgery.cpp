#include "lapp/surgery.hpp"

#include <fstream>

#include <json.hpp>

#include "lapp/io_util.hpp"

namespace lapp {

using nlohmann::json;

std::string manifest_to_json(const SurgeryManifest& m) {
  json j;
  j["arch"] = m.arch;
  j["bypass"] = m.bypass;
  j["c_target"] = m.c_target;
  j["t_total"] = m.t_total;
  j["t_kept"] = m.t_kept;
  j["params_before"] = m.params_before;
  j["params_after"] = m.params_after;
  j["surgery_epoch"] = m.surgery_epoch;
  j["surgery_iteration"] = m.surgery_iteration;
  j["modules"] = json::array();
  for (const auto& e : m.modules) {
    json je;
    je["name"] = e.name;
    je["c_out"] = e.c_out;
    je["kept"] = e.kept;
    je["rate"] = e.rate;
    je["d"] = e.d;
    je["kept_list"] = e.kept_list;
    j["modules"].push_back(std::move(je));
  }
  return j.dump(2);
}

SurgeryManifest manifest_from_json(const std::string& text) {
  json j = json::parse(text);
  SurgeryManifest m;
  m.arch = j.at("arch").get<std::string>();
  m.bypass = j.value("bypass", "v2");
  m.c_target = j.at("c_target").get<double>();
  m.t_total = j.at("t_total").get<int64_t>();
  m.t_kept = j.at("t_kept").get<int64_t>();
  m.params_before = j.at("params_before").get<int64_t>();
  m.params_after = j.at("params_after").get<int64_t>();
  m.surgery_epoch = j.at("surgery_epoch").get<int>();
  m.surgery_iteration = j.at("surgery_iteration").get<int64_t>();
  for (const auto& je : j.at("modules")) {
    SurgeryManifestEntry e;
    e.name = je.at("name").get<std::string>();
    e.c_out = je.at("c_out").get<int64_t>();
    e.kept = je.at("kept").get<int64_t>();
    e.rate = je.at("rate").get<double>();
    e.d = je.at("d").get<int64_t>();
    e.kept_list = je.at("kept_list").get<std::vector<int64_t>>();
    m.modules.push_back(std::move(e));
  }
  return m;
}

void manifest_save(const SurgeryManifest& m, const std::string& path) {
  write_file_atomic(path, manifest_to_json(m));
}

SurgeryManifest manifest_load(const std::string& path) {
  return manifest_from_json(read_file(path));
}

}  // namespace lapp
