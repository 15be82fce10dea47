#pragma once

#include <string>
#include <vector>

namespace peftlab {

/// Minimal deterministic scatter/line plot writer. Output depends only on the
/// data and labels (fixed number formatting, no timestamps).
class SvgPlot {
 public:
  SvgPlot(std::string title, std::string x_label, std::string y_label);

  void set_log_x(bool log_x) { log_x_ = log_x; }
  void add_series(std::string name, std::vector<std::pair<double, double>> points,
                  bool connect = false);

  std::string render() const;
  void write(const std::string& path) const;

 private:
  struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
    bool connect = false;
  };
  std::string title_, x_label_, y_label_;
  bool log_x_ = false;
  std::vector<Series> series_;
};

}  // namespace peftlab
