#include "wbm/io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <system_error>

#include "wbm/errors.hpp"

namespace wbm::io {

namespace {

void append_u32(std::string& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 4);
}

void append_u64(std::string& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 8);
}

void append_i32(std::string& out, std::int32_t v) { append_u32(out, static_cast<std::uint32_t>(v)); }

void append_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  append_u32(out, bits);
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  bool eof() const { return pos >= bytes.size(); }

  void need(std::size_t n, const char* what) {
    if (pos + n > bytes.size()) throw IoError(std::string("truncated record while reading ") + what);
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }

  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }

  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

std::uint64_t parse_u64(std::string_view field, const char* what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc{} || p != field.data() + field.size()) {
    throw IoError(std::string("bad ") + what + " field: '" + std::string(field) + "'");
  }
  return v;
}

std::int64_t parse_i64(std::string_view field, const char* what) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc{} || p != field.data() + field.size()) {
    throw IoError(std::string("bad ") + what + " field: '" + std::string(field) + "'");
  }
  return v;
}

double parse_double(std::string_view field, const char* what) {
  double v = 0;
  auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc{} || p != field.data() + field.size()) {
    throw IoError(std::string("bad ") + what + " field: '" + std::string(field) + "'");
  }
  return v;
}

// Splits `line` on commas into exactly n fields.
std::vector<std::string_view> split_fields(std::string_view line, std::size_t n, const char* what) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  if (out.size() != n) {
    throw IoError(std::string("expected ") + std::to_string(n) + " fields in " + what + " row, got " +
                  std::to_string(out.size()));
  }
  return out;
}

// Calls fn(line) for every non-empty line after the header, which must match.
template <typename Fn>
void for_each_row(const std::string& text, std::string_view header, Fn&& fn) {
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line(text.data() + pos, (nl == std::string::npos ? text.size() : nl) - pos);
    pos = (nl == std::string::npos) ? text.size() : nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (first) {
      if (line != header) throw IoError("unexpected CSV header: '" + std::string(line) + "'");
      first = false;
      continue;
    }
    fn(line);
  }
  if (first) throw IoError("empty CSV (missing header)");
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw IoError("failed to format double");
  return std::string(buf, p);
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

std::string measurements_to_csv(const std::vector<MeasurementTuple>& rows) {
  std::string out = "subject_id,absolute_hour,variable_id,value\n";
  for (const auto& r : rows) {
    out += std::to_string(r.subject_id);
    out += ',';
    out += std::to_string(r.absolute_hour);
    out += ',';
    out += std::to_string(r.variable_id);
    out += ',';
    out += format_double(r.value);
    out += '\n';
  }
  return out;
}

std::vector<MeasurementTuple> measurements_from_csv(const std::string& text) {
  std::vector<MeasurementTuple> rows;
  for_each_row(text, "subject_id,absolute_hour,variable_id,value", [&](std::string_view line) {
    auto f = split_fields(line, 4, "measurement");
    MeasurementTuple t;
    t.subject_id = parse_u64(f[0], "subject_id");
    t.absolute_hour = parse_i64(f[1], "absolute_hour");
    t.variable_id = static_cast<int>(parse_i64(f[2], "variable_id"));
    t.value = parse_double(f[3], "value");
    rows.push_back(t);
  });
  return rows;
}

std::string labels_to_csv(const LabelSet& labels) {
  std::string out = "subject_id,age,sex,week_index,event_flag\n";
  for (const auto& r : labels.rows) {
    out += std::to_string(r.subject_id);
    out += ',';
    out += format_double(r.age);
    out += ',';
    out += std::to_string(r.sex);
    out += ',';
    out += std::to_string(r.week_index);
    out += ',';
    out += std::to_string(r.event_flag);
    out += '\n';
  }
  return out;
}

LabelSet labels_from_csv(const std::string& text) {
  LabelSet labels;
  for_each_row(text, "subject_id,age,sex,week_index,event_flag", [&](std::string_view line) {
    auto f = split_fields(line, 5, "label");
    WeekLabel r;
    r.subject_id = parse_u64(f[0], "subject_id");
    r.age = parse_double(f[1], "age");
    r.sex = static_cast<int>(parse_i64(f[2], "sex"));
    r.week_index = parse_i64(f[3], "week_index");
    r.event_flag = static_cast<int>(parse_i64(f[4], "event_flag"));
    labels.rows.push_back(r);
  });
  return labels;
}

std::string splits_to_csv(const SplitAssignment& s) {
  std::string out = "subject_id,split\n";
  auto emit = [&](const std::vector<std::uint64_t>& ids, const char* tag) {
    for (auto id : ids) {
      out += std::to_string(id);
      out += ',';
      out += tag;
      out += '\n';
    }
  };
  emit(s.train, "train");
  emit(s.val, "val");
  emit(s.test, "test");
  return out;
}

SplitAssignment splits_from_csv(const std::string& text) {
  SplitAssignment s;
  for_each_row(text, "subject_id,split", [&](std::string_view line) {
    auto f = split_fields(line, 2, "split");
    std::uint64_t id = parse_u64(f[0], "subject_id");
    if (f[1] == "train") {
      s.train.push_back(id);
    } else if (f[1] == "val") {
      s.val.push_back(id);
    } else if (f[1] == "test") {
      s.test.push_back(id);
    } else {
      throw IoError("unknown split tag: '" + std::string(f[1]) + "'");
    }
  });
  return s;
}

std::string grids_to_bytes(const std::vector<WeekGrid>& grids) {
  std::string out;
  out.reserve(16 + grids.size() * (8 + 4 + kHoursPerWeek * kNumVariables * 5));
  out += "WBMG";
  append_u32(out, 1);
  for (const auto& g : grids) {
    append_u64(out, g.subject_id);
    append_i32(out, static_cast<std::int32_t>(g.week_index));
    for (int t = 0; t < kHoursPerWeek; ++t) {
      for (int v = 0; v < kNumVariables; ++v) append_f32(out, static_cast<float>(g.values(t, v)));
    }
    for (int t = 0; t < kHoursPerWeek; ++t) {
      for (int v = 0; v < kNumVariables; ++v) out += static_cast<char>(g.mask(t, v));
    }
  }
  return out;
}

std::vector<WeekGrid> grids_from_bytes(const std::string& bytes) {
  Reader r{bytes};
  r.need(4, "magic");
  if (bytes.compare(0, 4, "WBMG") != 0) throw IoError("bad grid file magic");
  r.pos = 4;
  std::uint32_t version = r.u32("version");
  if (version != 1) throw IoError("unsupported grid file version " + std::to_string(version));
  std::vector<WeekGrid> grids;
  while (!r.eof()) {
    WeekGrid g;
    g.subject_id = r.u64("subject_id");
    g.week_index = r.i32("week_index");
    for (int t = 0; t < kHoursPerWeek; ++t) {
      for (int v = 0; v < kNumVariables; ++v) g.values(t, v) = r.f32("values");
    }
    r.need(static_cast<std::size_t>(kHoursPerWeek) * kNumVariables, "mask");
    for (int t = 0; t < kHoursPerWeek; ++t) {
      for (int v = 0; v < kNumVariables; ++v) {
        g.mask(t, v) = static_cast<std::uint8_t>(bytes[r.pos++]);
      }
    }
    grids.push_back(std::move(g));
  }
  return grids;
}

std::string embeddings_to_bytes(const std::vector<EmbeddingRecord>& records, int dim) {
  std::string out;
  out += "WBME";
  append_u32(out, 1);
  append_u32(out, static_cast<std::uint32_t>(dim));
  append_u64(out, records.size());
  for (const auto& rec : records) {
    if (static_cast<int>(rec.vector.size()) != dim) {
      throw ContractError("embedding record dimension mismatch");
    }
    append_u64(out, rec.subject_id);
    append_i32(out, rec.week_index);
    for (float v : rec.vector) append_f32(out, v);
  }
  return out;
}

std::vector<EmbeddingRecord> embeddings_from_bytes(const std::string& bytes, int* dim_out) {
  Reader r{bytes};
  r.need(4, "magic");
  if (bytes.compare(0, 4, "WBME") != 0) throw IoError("bad embedding file magic");
  r.pos = 4;
  std::uint32_t version = r.u32("version");
  if (version != 1) throw IoError("unsupported embedding file version " + std::to_string(version));
  int dim = static_cast<int>(r.u32("dim"));
  std::uint64_t count = r.u64("count");
  if (dim_out) *dim_out = dim;
  std::vector<EmbeddingRecord> records;
  records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EmbeddingRecord rec;
    rec.subject_id = r.u64("subject_id");
    rec.week_index = r.i32("week_index");
    rec.vector.resize(static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d) rec.vector[static_cast<std::size_t>(d)] = r.f32("vector");
    records.push_back(std::move(rec));
  }
  if (!r.eof()) throw IoError("trailing bytes after embedding records");
  return records;
}

}  // namespace wbm::io
