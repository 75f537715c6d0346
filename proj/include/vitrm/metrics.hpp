#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace vitrm {

// One record per (epoch, split), emitted as line-delimited JSON.
struct MetricRecord {
  int epoch = 0;
  std::string split;  // "train" or "val"
  double loss_total = 0.0;
  double loss_cls = 0.0;
  double loss_halt = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  double mean_q = 0.0;
  double supervision_steps_used = 0.0;
  double wall_seconds = 0.0;
};

inline nlohmann::ordered_json to_json(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["loss_total"] = r.loss_total;
  j["loss_cls"] = r.loss_cls;
  j["loss_halt"] = r.loss_halt;
  j["accuracy"] = r.accuracy;
  j["lr"] = r.lr;
  j["mean_q"] = r.mean_q;
  j["supervision_steps_used"] = r.supervision_steps_used;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

inline MetricRecord metric_from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.split = j.at("split").get<std::string>();
  r.loss_total = j.at("loss_total").get<double>();
  r.loss_cls = j.at("loss_cls").get<double>();
  r.loss_halt = j.at("loss_halt").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.lr = j.at("lr").get<double>();
  r.mean_q = j.at("mean_q").get<double>();
  r.supervision_steps_used = j.at("supervision_steps_used").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

// Appends records in emission order, one line each, flushed immediately.
class MetricWriter {
 public:
  explicit MetricWriter(const std::string& path)
      : out_(path, std::ios::app) {
    if (!out_)
      throw std::runtime_error("metrics: cannot open " + path +
                               " for writing");
  }

  void append(const MetricRecord& r) {
    out_ << to_json(r).dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace vitrm
