#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ketlab/runner.hpp"

namespace ketlab::runner {

using nlohmann::json;

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct Agg {
  std::vector<double> xs;
  void add(double x) { xs.push_back(x); }
  size_t n() const { return xs.size(); }
  double mean() const {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / xs.size();
  }
  double stddev() const {  // sample stddev, 0 when n < 2
    if (xs.size() < 2) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / (xs.size() - 1));
  }
};

void write_text(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

std::string cells_csv(const std::vector<const CellResult*>& cells) {
  std::ostringstream os;
  os << "id,method,layer,task,policy,rep,fact_id,ok,post_edit_edited,post_edit_intrinsic,"
        "post_ft_edited,post_ft_intrinsic,steps,epochs,stop_reason\n";
  for (const CellResult* r : cells) {
    os << r->key.id() << "," << r->key.method << "," << r->key.layer << ","
       << corpus::task_name(r->key.task) << "," << r->key.policy_name << "," << r->key.rep << ","
       << r->fact_id << "," << (r->ok ? 1 : 0) << "," << fmt(r->post_edit_edited) << ","
       << fmt(r->post_edit_intrinsic) << "," << fmt(r->post_ft_edited) << ","
       << fmt(r->post_ft_intrinsic) << "," << r->ft_steps << "," << r->ft_epochs << ","
       << r->stop_reason << "\n";
  }
  return os.str();
}

struct GroupStats {
  Agg post_edit_edited, post_edit_intrinsic, post_ft_edited, post_ft_intrinsic;
  void add(const CellResult& r) {
    if (r.post_edit_edited >= 0) post_edit_edited.add(r.post_edit_edited);
    post_edit_intrinsic.add(r.post_edit_intrinsic);
    if (r.post_ft_edited >= 0) post_ft_edited.add(r.post_ft_edited);
    post_ft_intrinsic.add(r.post_ft_intrinsic);
  }
  json to_json() const {
    auto block = [](const Agg& a) {
      return json{{"mean", a.mean()}, {"stddev", a.stddev()}, {"n", a.n()}};
    };
    return json{{"post_edit_edited", block(post_edit_edited)},
                {"post_edit_intrinsic", block(post_edit_intrinsic)},
                {"post_ft_edited", block(post_ft_edited)},
                {"post_ft_intrinsic", block(post_ft_intrinsic)}};
  }
};

std::string group_csv_header() {
  return "post_edit_edited_mean,post_edit_edited_std,post_edit_intrinsic_mean,"
         "post_edit_intrinsic_std,post_ft_edited_mean,post_ft_edited_std,"
         "post_ft_intrinsic_mean,post_ft_intrinsic_std,n\n";
}

std::string group_csv_row(const GroupStats& g) {
  std::ostringstream os;
  os << fmt(g.post_edit_edited.mean()) << "," << fmt(g.post_edit_edited.stddev()) << ","
     << fmt(g.post_edit_intrinsic.mean()) << "," << fmt(g.post_edit_intrinsic.stddev()) << ","
     << fmt(g.post_ft_edited.mean()) << "," << fmt(g.post_ft_edited.stddev()) << ","
     << fmt(g.post_ft_intrinsic.mean()) << "," << fmt(g.post_ft_intrinsic.stddev()) << ","
     << g.post_ft_intrinsic.n() << "\n";
  return os.str();
}

}  // namespace

ReportKind report_kind_from_name(const std::string& s) {
  if (s == "fig2") return ReportKind::fig2;
  if (s == "fig3a") return ReportKind::fig3a;
  if (s == "fig3b") return ReportKind::fig3b;
  if (s == "fig4") return ReportKind::fig4;
  if (s == "table1") return ReportKind::table1;
  if (s == "appc") return ReportKind::appc;
  throw std::invalid_argument("unknown report kind: " + s);
}

std::string report_kind_name(ReportKind k) {
  switch (k) {
    case ReportKind::fig2: return "fig2";
    case ReportKind::fig3a: return "fig3a";
    case ReportKind::fig3b: return "fig3b";
    case ReportKind::fig4: return "fig4";
    case ReportKind::table1: return "table1";
    case ReportKind::appc: return "appc";
  }
  throw std::logic_error("bad report kind");
}

void emit_report(const fs::path& out_dir, ReportKind kind) {
  RunRecord record = load_record(out_dir);
  const fs::path rdir = out_dir / "reports";
  fs::create_directories(rdir);
  const std::string kname = report_kind_name(kind);

  auto incomplete = [&](const std::string& why) {
    throw std::runtime_error("incomplete grid for report kind " + kname + ": " + why);
  };

  if (kind == ReportKind::fig2 || kind == ReportKind::appc) {
    // method x task matrix (appc: the sft column only), full policy + controls
    const bool sft_only = kind == ReportKind::appc;
    std::vector<const CellResult*> rows;
    std::map<std::pair<std::string, std::string>, GroupStats> groups;
    for (const CellResult& r : record.cells) {
      if (r.key.policy_name != "full") continue;
      if (sft_only && r.key.task != corpus::TaskKind::sft) continue;
      rows.push_back(&r);
      groups[{r.key.method, corpus::task_name(r.key.task)}].add(r);
    }
    if (groups.empty()) incomplete(sft_only ? "no sft cells at the full policy" : "no full-policy cells");
    std::ostringstream os;
    os << "method,task," << group_csv_header();
    json summary = json::array();
    for (const auto& [key, g] : groups) {
      os << key.first << "," << key.second << "," << group_csv_row(g);
      json row = g.to_json();
      row["method"] = key.first;
      row["task"] = key.second;
      summary.push_back(row);
    }
    write_text(rdir / (kname + ".csv"), os.str());
    write_text(rdir / (kname + "_cells.csv"), cells_csv(rows));
    write_text(rdir / (kname + ".json"), summary.dump(2) + "\n");
    return;
  }

  if (kind == ReportKind::fig3a || kind == ReportKind::fig3b) {
    const std::string prefix = kind == ReportKind::fig3a ? "thr" : "win";
    std::vector<const CellResult*> rows;
    std::map<std::pair<std::string, std::string>, GroupStats> groups;  // (policy, method)
    std::set<std::string> policies;
    for (const CellResult& r : record.cells) {
      if (r.key.method == "none") continue;
      if (r.key.policy_name.rfind(prefix, 0) != 0) continue;
      rows.push_back(&r);
      groups[{r.key.policy_name, r.key.method}].add(r);
      policies.insert(r.key.policy_name);
    }
    if (policies.size() < 2)
      incomplete("need at least two " + std::string(prefix == "thr" ? "threshold" : "window") +
                 " policies");
    std::ostringstream os;
    os << "policy,method," << group_csv_header();
    json summary = json::array();
    for (const auto& [key, g] : groups) {
      os << key.first << "," << key.second << "," << group_csv_row(g);
      json row = g.to_json();
      row["policy"] = key.first;
      row["method"] = key.second;
      summary.push_back(row);
    }
    write_text(rdir / (kname + ".csv"), os.str());
    write_text(rdir / (kname + "_cells.csv"), cells_csv(rows));
    write_text(rdir / (kname + ".json"), summary.dump(2) + "\n");
    return;
  }

  if (kind == ReportKind::fig4) {
    // token-class curves of ROME cells that tracked distributions
    struct Line {
      std::string cell;
      int idx;
      double epoch, p_edit, p_true, p_related, p_other;
    };
    std::vector<Line> lines;
    std::map<int, std::array<Agg, 5>> by_idx;  // epoch + four masses
    for (const CellResult& r : record.cells) {
      if (r.key.method != "rome") continue;
      const fs::path dpath = out_dir / "cells" / r.key.id() / "dist.jsonl";
      if (!fs::exists(dpath)) continue;
      std::ifstream in(dpath);
      std::string text;
      int idx = 0;
      while (std::getline(in, text)) {
        if (text.empty()) continue;
        json j = json::parse(text);
        if (j.at("phase").get<std::string>() != "finetune") continue;
        Line l{r.key.id(),
               idx,
               j.at("epoch").get<double>(),
               j.at("p_edit_target").get<double>(),
               j.at("p_true").get<double>(),
               j.at("p_related").get<double>(),
               j.at("p_other").get<double>()};
        auto& agg = by_idx[idx];
        agg[0].add(l.epoch);
        agg[1].add(l.p_edit);
        agg[2].add(l.p_true);
        agg[3].add(l.p_related);
        agg[4].add(l.p_other);
        lines.push_back(std::move(l));
        ++idx;
      }
    }
    if (lines.empty()) incomplete("no ROME cells recorded token distributions");
    std::ostringstream raw;
    raw << "cell,record,epoch,p_edit_target,p_true,p_related,p_other\n";
    for (const Line& l : lines)
      raw << l.cell << "," << l.idx << "," << fmt(l.epoch) << "," << fmt(l.p_edit) << ","
          << fmt(l.p_true) << "," << fmt(l.p_related) << "," << fmt(l.p_other) << "\n";
    std::ostringstream os;
    os << "record,n,epoch_mean,p_edit_target_mean,p_true_mean,p_related_mean,p_other_mean\n";
    json summary = json::array();
    for (const auto& [idx, agg] : by_idx) {
      os << idx << "," << agg[1].n() << "," << fmt(agg[0].mean()) << "," << fmt(agg[1].mean())
         << "," << fmt(agg[2].mean()) << "," << fmt(agg[3].mean()) << "," << fmt(agg[4].mean())
         << "\n";
      summary.push_back({{"record", idx},
                         {"n", agg[1].n()},
                         {"epoch", agg[0].mean()},
                         {"p_edit_target", agg[1].mean()},
                         {"p_true", agg[2].mean()},
                         {"p_related", agg[3].mean()},
                         {"p_other", agg[4].mean()}});
    }
    write_text(rdir / "fig4.csv", os.str());
    write_text(rdir / "fig4_cells.csv", raw.str());
    write_text(rdir / "fig4.json", summary.dump(2) + "\n");
    return;
  }

  // table1: per-snapshot top-k rows of the first ROME cell with a recorded
  // distribution (pre-edit, post-edit, then per evaluation point).
  std::vector<std::string> ids;
  for (const CellResult& r : record.cells)
    if (r.key.method == "rome" && fs::exists(out_dir / "cells" / r.key.id() / "dist.jsonl"))
      ids.push_back(r.key.id());
  if (ids.empty()) incomplete("no ROME cells recorded top-k tokens");
  std::sort(ids.begin(), ids.end());
  const fs::path dpath = out_dir / "cells" / ids.front() / "dist.jsonl";
  std::ifstream in(dpath);
  std::ostringstream os;
  os << "snapshot,rank,token,probability\n";
  json summary = json::array();
  std::string text;
  int ft_idx = 0;
  while (std::getline(in, text)) {
    if (text.empty()) continue;
    json j = json::parse(text);
    std::string tag;
    if (j.at("phase").get<std::string>() == "pre_edit") {
      tag = "pre_edit";
    } else if (ft_idx == 0) {
      tag = "post_edit";
      ++ft_idx;
    } else {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "epoch_%.3f", j.at("epoch").get<double>());
      tag = buf;
      ++ft_idx;
    }
    json row = {{"snapshot", tag}, {"topk", j.at("topk")}};
    summary.push_back(row);
    int rank = 1;
    for (const json& pair : j.at("topk"))
      os << tag << "," << rank++ << "," << pair[0].get<std::string>() << ","
         << fmt(pair[1].get<double>()) << "\n";
  }
  write_text(rdir / "table1.csv", os.str());
  write_text(rdir / "table1.json", json({{"cell", ids.front()}, {"rows", summary}}).dump(2) + "\n");
}

}  // namespace ketlab::runner
