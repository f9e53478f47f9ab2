#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace deqflow::harness {

/// Shortest round-trip decimal; "nan", "inf", "-inf" for non-finite values.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class CsvField {
 public:
  CsvField(const std::string& s) : text_(s) {}
  CsvField(const char* s) : text_(s) {}
  template <typename T, std::enable_if_t<std::is_integral_v<T> && !std::is_same_v<T, bool>, int> = 0>
  CsvField(T v) : text_(std::to_string(v)) {}
  CsvField(bool v) : text_(v ? "1" : "0") {}
  CsvField(double v) : text_(format_number(v)) {}
  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

/// Append-only CSV file, flushed every `flush_every` rows and on close.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header, int flush_every = 1)
      : out_(path, std::ios::binary | std::ios::trunc), columns_(header.size()), flush_every_(flush_every) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    write_line(header);
    out_.flush();
  }

  void row(std::initializer_list<CsvField> fields) {
    if (fields.size() != columns_) throw std::invalid_argument("CsvWriter: wrong number of fields");
    std::vector<std::string> cells;
    for (const CsvField& f : fields) cells.push_back(f.text());
    write_line(cells);
    if (++pending_ >= flush_every_) flush();
  }

  void flush() {
    out_.flush();
    pending_ = 0;
  }

  ~CsvWriter() { out_.flush(); }

 private:
  void write_line(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

  std::ofstream out_;
  std::size_t columns_;
  int flush_every_;
  int pending_ = 0;
};

}  // namespace deqflow::harness
