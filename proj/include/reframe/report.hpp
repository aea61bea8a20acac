// Report emission: a fixed-width summary table with the ordering verdicts,
// the raw per-evaluation CSV, and standalone SVG line plots (score against
// memory size, per-arm training curves). Everything is a pure function of
// the bundle, so regenerating a report produces byte-identical files.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "reframe/ablation.hpp"

namespace reframe {

namespace detail {

inline std::string arm_color(const std::string& arm) {
  if (arm == "baseline_dt") return "#777777";
  if (arm == "finetuned_dt") return "#9467bd";
  if (arm == "reframe_expert") return "#1f77b4";
  if (arm == "reframe_swap_eval") return "#d62728";
  if (arm == "reframe_dataset_amb") return "#2ca02c";
  return "#17becf";
}

// Largest size draws solid, smaller ones increasingly sparse dashes.
inline std::string size_dash(std::size_t rank) {
  static const char* dashes[] = {"", "7,3", "2,3", "1,4"};
  return dashes[std::min<std::size_t>(rank, 3)];
}

struct Series {
  std::string label;
  std::string color;
  std::string dash;  // empty for solid
  std::vector<std::pair<double, double>> pts;
  std::vector<std::pair<double, std::pair<double, double>>> bars;  // x, lo..hi
};

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

// Minimal self-contained line plot. Fixed 640x420 canvas, committed light
// styling so the file renders the same everywhere.
inline std::string render_line_plot(const std::string& title,
                                    const std::string& x_label,
                                    const std::string& y_label,
                                    const std::vector<Series>& series,
                                    const std::vector<double>& x_ticks) {
  const double x0 = 70, x1 = 610, y0 = 370, y1 = 50;  // plot box, y flipped
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const Series& s : series) {
    for (const auto& [x, y] : s.pts) {
      if (first) {
        xmin = xmax = x;
        ymin = ymax = y;
        first = false;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    for (const auto& [x, lohi] : s.bars) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, lohi.first);
      ymax = std::max(ymax, lohi.second);
    }
  }
  for (double t : x_ticks) {
    xmin = std::min(xmin, t);
    xmax = std::max(xmax, t);
  }
  if (xmax <= xmin) xmax = xmin + 1.0;
  ymin = std::floor(ymin / 10.0) * 10.0;
  ymax = std::ceil(ymax / 10.0) * 10.0;
  if (ymax <= ymin) ymax = ymin + 10.0;
  double xpad = 0.04 * (xmax - xmin);
  double lox = xmin - xpad, hix = xmax + xpad;

  auto px = [&](double x) { return x0 + (x - lox) / (hix - lox) * (x1 - x0); };
  auto py = [&](double y) { return y0 + (y - ymin) / (ymax - ymin) * (y1 - y0); };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" "
         "height=\"420\" viewBox=\"0 0 640 420\">\n";
  svg += "<rect width=\"640\" height=\"420\" fill=\"#ffffff\"/>\n";
  svg += "<text x=\"320\" y=\"26\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"15\" fill=\"#222\">" +
         title + "</text>\n";

  // axes
  svg += "<line x1=\"" + fmt_fixed(x0, 1) + "\" y1=\"" + fmt_fixed(y0, 1) +
         "\" x2=\"" + fmt_fixed(x1, 1) + "\" y2=\"" + fmt_fixed(y0, 1) +
         "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  svg += "<line x1=\"" + fmt_fixed(x0, 1) + "\" y1=\"" + fmt_fixed(y0, 1) +
         "\" x2=\"" + fmt_fixed(x0, 1) + "\" y2=\"" + fmt_fixed(y1, 1) +
         "\" stroke=\"#444\" stroke-width=\"1\"/>\n";

  for (double t : x_ticks) {
    double x = px(t);
    svg += "<line x1=\"" + fmt_fixed(x, 1) + "\" y1=\"" + fmt_fixed(y0, 1) +
           "\" x2=\"" + fmt_fixed(x, 1) + "\" y2=\"" + fmt_fixed(y0 + 5, 1) +
           "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + fmt_fixed(x, 1) + "\" y=\"" + fmt_fixed(y0 + 18, 1) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\" fill=\"#333\">" +
           fmt_g(t) + "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    double v = ymin + (ymax - ymin) * i / 4.0;
    double y = py(v);
    svg += "<line x1=\"" + fmt_fixed(x0 - 5, 1) + "\" y1=\"" +
           fmt_fixed(y, 1) + "\" x2=\"" + fmt_fixed(x0, 1) + "\" y2=\"" +
           fmt_fixed(y, 1) + "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + fmt_fixed(x0 - 9, 1) + "\" y=\"" +
           fmt_fixed(y + 4, 1) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\" fill=\"#333\">" +
           fmt_g(v) + "</text>\n";
  }
  svg += "<text x=\"" + fmt_fixed((x0 + x1) / 2, 1) + "\" y=\"404\" "
         "text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
         "fill=\"#222\">" +
         x_label + "</text>\n";
  svg += "<text x=\"16\" y=\"" + fmt_fixed((y0 + y1) / 2, 1) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\" fill=\"#222\" transform=\"rotate(-90 16 " +
         fmt_fixed((y0 + y1) / 2, 1) + ")\">" +
         y_label + "</text>\n";

  for (const Series& s : series) {
    for (const auto& [x, lohi] : s.bars) {
      double cx = px(x), lo = py(lohi.first), hi = py(lohi.second);
      svg += "<line x1=\"" + fmt_fixed(cx, 1) + "\" y1=\"" + fmt_fixed(lo, 1) +
             "\" x2=\"" + fmt_fixed(cx, 1) + "\" y2=\"" + fmt_fixed(hi, 1) +
             "\" stroke=\"" + s.color + "\" stroke-width=\"1\" "
             "opacity=\"0.6\"/>\n";
    }
    if (!s.pts.empty()) {
      std::string pts;
      for (const auto& [x, y] : s.pts) {
        if (!pts.empty()) pts += " ";
        pts += fmt_fixed(px(x), 1) + "," + fmt_fixed(py(y), 1);
      }
      svg += "<polyline fill=\"none\" stroke=\"" + s.color +
             "\" stroke-width=\"1.8\"";
      if (!s.dash.empty()) svg += " stroke-dasharray=\"" + s.dash + "\"";
      svg += " points=\"" + pts + "\"/>\n";
      for (const auto& [x, y] : s.pts)
        svg += "<circle cx=\"" + fmt_fixed(px(x), 1) + "\" cy=\"" +
               fmt_fixed(py(y), 1) + "\" r=\"2.5\" fill=\"" + s.color +
               "\"/>\n";
    }
  }

  double ly = 58;
  for (const Series& s : series) {
    svg += "<line x1=\"460\" y1=\"" + fmt_fixed(ly - 4, 1) +
           "\" x2=\"484\" y2=\"" + fmt_fixed(ly - 4, 1) + "\" stroke=\"" +
           s.color + "\" stroke-width=\"2\"";
    if (!s.dash.empty()) svg += " stroke-dasharray=\"" + s.dash + "\"";
    svg += "/>\n";
    svg += "<text x=\"490\" y=\"" + fmt_fixed(ly, 1) +
           "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">" +
           s.label + "</text>\n";
    ly += 16;
  }
  svg += "</svg>\n";
  return svg;
}

// Mean training curve for one (arm, size) cell: per step, average the
// per-run means over that run's evaluation seeds, then over runs.
inline std::vector<std::pair<double, double>> cell_curve(
    const ReportBundle& b, const std::string& arm, std::int64_t amb) {
  std::map<std::int64_t, std::pair<double, int>> acc;
  for (const RunResult& r : b.runs) {
    if (r.arm != arm || r.amb_size != amb) continue;
    std::map<std::int64_t, std::pair<double, int>> per;
    for (const MetricRow& m : r.rows)
      if (m.phase == "train") {
        per[m.step].first += m.mean_score;
        per[m.step].second += 1;
      }
    for (const auto& [step, sc] : per) {
      acc[step].first += sc.first / sc.second;
      acc[step].second += 1;
    }
  }
  std::vector<std::pair<double, double>> out;
  for (const auto& [step, sc] : acc)
    out.emplace_back(static_cast<double>(step), sc.first / sc.second);
  return out;
}

}  // namespace detail

// ------------------------------------------------------------- summary

inline std::string render_summary_text(const ReportBundle& b) {
  std::string out;
  out += "arm                   amb  runs   mean_score  std_score\n";
  for (const ArmCell& c : b.cells) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-20s %4lld  %2zu/%-2lld %11.2f %10.2f%s\n",
                  c.arm.c_str(), static_cast<long long>(c.amb_size),
                  c.scores.size(), static_cast<long long>(c.planned), c.mean,
                  c.stdev, c.complete() ? "" : "  [incomplete]");
    out += line;
  }
  out += "\nverdicts\n";
  for (const Verdict& v : b.verdicts) {
    std::string tag = !v.complete ? "INCOMPLETE" : (v.pass ? "PASS" : "FAIL");
    out += "  [" + tag + "] " + v.name + ": " + v.detail + "\n";
  }
  bool any_error = false;
  for (const RunResult& r : b.runs)
    if (!r.error.empty()) {
      if (!any_error) out += "\naborted runs\n";
      any_error = true;
      out += "  " + r.run + " (" + r.arm + ", amb " +
             std::to_string(r.amb_size) + ", seed " +
             std::to_string(r.run_seed) + "): " + r.error + "\n";
    }
  return out;
}

// --------------------------------------------------------------- plots

inline std::string render_size_plot(const ReportBundle& b) {
  std::vector<std::int64_t> sizes;
  for (const ArmCell& c : b.cells)
    if (is_reframe_arm(c.arm) &&
        std::find(sizes.begin(), sizes.end(), c.amb_size) == sizes.end())
      sizes.push_back(c.amb_size);
  std::sort(sizes.begin(), sizes.end());
  if (sizes.empty())
    for (const ArmCell& c : b.cells)
      if (std::find(sizes.begin(), sizes.end(), c.amb_size) == sizes.end())
        sizes.push_back(c.amb_size);
  std::sort(sizes.begin(), sizes.end());

  std::vector<detail::Series> series;
  for (const std::string& arm : arm_names()) {
    std::vector<const ArmCell*> cells;
    for (const ArmCell& c : b.cells)
      if (c.arm == arm) cells.push_back(&c);
    if (cells.empty()) continue;
    std::sort(cells.begin(), cells.end(),
              [](const ArmCell* a, const ArmCell* c) {
                return a->amb_size < c->amb_size;
              });
    detail::Series s;
    s.label = arm;
    s.color = detail::arm_color(arm);
    if (is_reframe_arm(arm)) {
      for (const ArmCell* c : cells) {
        s.pts.emplace_back(static_cast<double>(c->amb_size), c->mean);
        s.bars.push_back({static_cast<double>(c->amb_size),
                          {c->mean - c->stdev, c->mean + c->stdev}});
      }
    } else {
      // memoryless arms draw flat across the sweep for comparison
      s.dash = "4,4";
      s.pts.emplace_back(static_cast<double>(sizes.front()), cells[0]->mean);
      s.pts.emplace_back(static_cast<double>(sizes.back()), cells[0]->mean);
    }
    series.push_back(std::move(s));
  }
  std::vector<double> ticks;
  for (std::int64_t v : sizes) ticks.push_back(static_cast<double>(v));
  return detail::render_line_plot("normalized score by memory size",
                                  "memory size (trajectories)",
                                  "normalized score", series, ticks);
}

inline std::string render_curve_plot(const ReportBundle& b,
                                     const std::string& arm) {
  std::vector<std::int64_t> sizes;
  for (const ArmCell& c : b.cells)
    if (c.arm == arm &&
        std::find(sizes.begin(), sizes.end(), c.amb_size) == sizes.end())
      sizes.push_back(c.amb_size);
  std::sort(sizes.begin(), sizes.end(), std::greater<>());

  std::vector<detail::Series> series;
  double max_step = 0.0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    detail::Series s;
    s.label = arm + " amb " + std::to_string(sizes[i]);
    s.color = detail::arm_color(arm);
    s.dash = detail::size_dash(i);
    s.pts = detail::cell_curve(b, arm, sizes[i]);
    for (const auto& [x, y] : s.pts) max_step = std::max(max_step, x);
    if (!s.pts.empty()) series.push_back(std::move(s));
  }
  if (series.empty()) return "";
  std::vector<double> ticks;
  for (int i = 0; i <= 4; ++i) ticks.push_back(max_step * i / 4.0);
  return detail::render_line_plot("training progress: " + arm,
                                  "optimization step", "normalized score",
                                  series, ticks);
}

// --------------------------------------------------------------- writer

// Deterministic file set under `dir`: summary table, raw CSV, score-vs-size
// plot, one training-curve plot per arm that has snapshot rows. Empty or
// partial bundles render with gaps marked; nothing here fails them.
inline std::vector<std::filesystem::path> write_report(
    const ReportBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> files;

  std::filesystem::path summary = dir / "summary.txt";
  write_text_file(summary, render_summary_text(b));
  files.push_back(summary);

  std::filesystem::path csv = dir / "aggregate.csv";
  write_text_file(csv, render_bundle_csv(b));
  files.push_back(csv);

  if (!b.cells.empty()) {
    std::filesystem::path plot = dir / "score_vs_amb_size.svg";
    write_text_file(plot, render_size_plot(b));
    files.push_back(plot);
  }
  for (const std::string& arm : arm_names()) {
    std::string svg = render_curve_plot(b, arm);
    if (svg.empty()) continue;
    std::filesystem::path plot = dir / ("curve_" + arm + ".svg");
    write_text_file(plot, svg);
    files.push_back(plot);
  }
  return files;
}

}  // namespace reframe
