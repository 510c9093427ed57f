#include "calibfield/dataset.hpp"

#include "calibfield/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace calibfield {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string row_tag(Index row) { return "row " + std::to_string(row + 1); }

void check_row(Index row, double f, double y) {
  if (!std::isfinite(f) || f < 0.0 || f > 1.0) {
    std::ostringstream msg;
    msg << row_tag(row) << ": confidence " << f << " outside [0,1]";
    throw DataError(msg.str());
  }
  if (y != 0.0 && y != 1.0) {
    std::ostringstream msg;
    msg << row_tag(row) << ": outcome " << y << " is not 0 or 1";
    throw DataError(msg.str());
  }
}

fs::path sidecar_path(const fs::path& path) {
  fs::path side = path;
  side += ".groups.json";
  return side;
}

void write_sidecar(const Dataset& ds, const fs::path& path) {
  const auto side = sidecar_path(path);
  if (ds.group_names.empty()) {
    std::error_code ec;
    fs::remove(side, ec);
    return;
  }
  std::ofstream out(side);
  out << json{{"names", ds.group_names}}.dump(2) << "\n";
}

void read_sidecar(Dataset& ds, const fs::path& path) {
  const auto side = sidecar_path(path);
  if (!ds.group_labels || !fs::exists(side)) return;
  std::ifstream in(side);
  try {
    ds.group_names = json::parse(in).at("names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(side.string() + ": malformed group name table: " + e.what());
  }
}

double parse_double(std::string_view token, Index row, const std::string& column) {
  // from_chars for double is available in libstdc++ 11.
  double value = 0.0;
  const auto* begin = token.data();
  const auto* end = token.data() + token.size();
  while (begin < end && *begin == ' ') ++begin;
  while (end > begin && (end[-1] == ' ' || end[-1] == '\r')) --end;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || begin == end) {
    throw DataError(row_tag(row) + ": cannot parse column '" + column + "' value '" +
                    std::string(token) + "'");
  }
  return value;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

// Group tokens are integer ids unless any token fails to parse as one, in
// which case every distinct token becomes a name in first-appearance order.
void assign_groups(Dataset& ds, const std::vector<std::string>& tokens) {
  bool all_int = true;
  std::vector<int> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size() && all_int; ++i) {
    const auto& t = tokens[i];
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), ids[i]);
    all_int = ec == std::errc() && ptr == t.data() + t.size() && !t.empty();
  }
  ds.group_labels = Eigen::VectorXi(static_cast<Index>(tokens.size()));
  if (all_int) {
    for (std::size_t i = 0; i < tokens.size(); ++i) (*ds.group_labels)(static_cast<Index>(i)) = ids[i];
    return;
  }
  std::map<std::string, int> lookup;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto [it, inserted] = lookup.try_emplace(tokens[i], static_cast<int>(ds.group_names.size()));
    if (inserted) ds.group_names.push_back(tokens[i]);
    (*ds.group_labels)(static_cast<Index>(i)) = it->second;
  }
}

struct RowBuffer {
  std::vector<double> embedding;
  std::vector<double> f, y, delta;
  std::vector<std::string> groups;
  Index dim = -1;

  void push_embedding(std::span<const double> x, Index row) {
    if (dim < 0) {
      dim = static_cast<Index>(x.size());
      if (dim == 0) throw DataError(row_tag(row) + ": empty embedding");
    } else if (static_cast<Index>(x.size()) != dim) {
      throw DataError(row_tag(row) + ": embedding has " + std::to_string(x.size()) +
                      " dimensions, expected " + std::to_string(dim));
    }
    for (double v : x) {
      if (!std::isfinite(v)) throw DataError(row_tag(row) + ": non-finite embedding value");
    }
    embedding.insert(embedding.end(), x.begin(), x.end());
  }

  Dataset finish(bool has_delta, bool has_group) {
    const auto n = static_cast<Index>(f.size());
    if (n == 0) throw DataError("empty file: no data rows");
    Dataset ds;
    ds.embeddings = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        embedding.data(), n, dim);
    ds.confidences = Eigen::Map<const Eigen::VectorXd>(f.data(), n);
    ds.outcomes = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
    if (has_delta) ds.true_field = Eigen::Map<const Eigen::VectorXd>(delta.data(), n);
    if (has_group) assign_groups(ds, groups);
    return ds;
  }
};

Dataset load_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header_views = split_commas(line);
  std::vector<std::string> header(header_views.begin(), header_views.end());
  if (header.size() < 3 || header[0] != "f" || header[1] != "y") {
    throw DataError("CSV header must start with f,y,x0");
  }
  std::size_t col = 2;
  while (col < header.size() && header[col] == "x" + std::to_string(col - 2)) ++col;
  const std::size_t dim = col - 2;
  if (dim == 0) throw DataError("CSV header has no embedding columns x0..");
  bool has_delta = false;
  bool has_group = false;
  if (col < header.size() && header[col] == "delta_true") {
    has_delta = true;
    ++col;
  }
  if (col < header.size() && header[col] == "group") {
    has_group = true;
    ++col;
  }
  if (col != header.size()) throw DataError("unexpected CSV column '" + header[col] + "'");

  RowBuffer buf;
  std::vector<double> x(dim);
  Index row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) {
      if (cells.size() > 2 && cells.size() != header.size()) {
        throw DataError(row_tag(row) + ": expected " + std::to_string(header.size()) +
                        " columns, found " + std::to_string(cells.size()) +
                        " (ragged embedding dimensions?)");
      }
      throw DataError(row_tag(row) + ": malformed row");
    }
    const double f = parse_double(cells[0], row, "f");
    const double y = parse_double(cells[1], row, "y");
    check_row(row, f, y);
    for (std::size_t k = 0; k < dim; ++k) x[k] = parse_double(cells[2 + k], row, header[2 + k]);
    buf.push_embedding(x, row);
    buf.f.push_back(f);
    buf.y.push_back(y);
    std::size_t next = 2 + dim;
    if (has_delta) buf.delta.push_back(parse_double(cells[next++], row, "delta_true"));
    if (has_group) {
      auto g = cells[next];
      while (!g.empty() && g.front() == ' ') g.remove_prefix(1);
      while (!g.empty() && g.back() == ' ') g.remove_suffix(1);
      buf.groups.emplace_back(g);
    }
    ++row;
  }
  return buf.finish(has_delta, has_group);
}

Dataset load_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  RowBuffer buf;
  std::string line;
  Index row = 0;
  int delta_seen = -1;
  int group_seen = -1;
  std::vector<double> x;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception&) {
      throw DataError(row_tag(row) + ": malformed JSON");
    }
    try {
      const double f = obj.at("f").get<double>();
      const double y = obj.at("y").get<double>();
      check_row(row, f, y);
      x = obj.at("x").get<std::vector<double>>();
      buf.push_embedding(x, row);
      buf.f.push_back(f);
      buf.y.push_back(y);
      const int has_delta = obj.contains("delta_true") ? 1 : 0;
      const int has_group = obj.contains("group") ? 1 : 0;
      if (delta_seen < 0) delta_seen = has_delta;
      if (group_seen < 0) group_seen = has_group;
      if (has_delta != delta_seen || has_group != group_seen) {
        throw DataError(row_tag(row) + ": optional keys differ from the first row");
      }
      if (has_delta) buf.delta.push_back(obj["delta_true"].get<double>());
      if (has_group) {
        const auto& g = obj["group"];
        buf.groups.push_back(g.is_string() ? g.get<std::string>() : g.dump());
      }
    } catch (const json::exception& e) {
      throw DataError(row_tag(row) + ": " + e.what());
    }
    ++row;
  }
  return buf.finish(delta_seen == 1, group_seen == 1);
}

constexpr char kMagic[5] = {'C', 'F', 'L', 'D', '1'};
constexpr std::uint8_t kHasTrueField = 1;
constexpr std::uint8_t kHasGroups = 2;

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw DataError("truncated binary file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

void save_binary(const Dataset& ds, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_u64(out, static_cast<std::uint64_t>(ds.size()));
  put_u64(out, static_cast<std::uint64_t>(ds.dim()));
  std::uint8_t flags = 0;
  if (ds.true_field) flags |= kHasTrueField;
  if (ds.group_labels) flags |= kHasGroups;
  out.put(static_cast<char>(flags));
  for (Index i = 0; i < ds.size(); ++i)
    for (Index k = 0; k < ds.dim(); ++k) put_f64(out, ds.embeddings(i, k));
  for (Index i = 0; i < ds.size(); ++i) put_f64(out, ds.confidences(i));
  for (Index i = 0; i < ds.size(); ++i) put_f64(out, ds.outcomes(i));
  if (ds.true_field)
    for (Index i = 0; i < ds.size(); ++i) put_f64(out, (*ds.true_field)(i));
  if (ds.group_labels)
    for (Index i = 0; i < ds.size(); ++i)
      put_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>((*ds.group_labels)(i))));
}

Dataset load_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[5] = {};
  if (!in.read(magic, 5)) throw DataError("empty file: " + path.string());
  if (!std::equal(magic, magic + 5, kMagic)) throw DataError("bad magic in " + path.string());
  const auto n = static_cast<Index>(get_u64(in));
  const auto d = static_cast<Index>(get_u64(in));
  const int flags = in.get();
  if (flags == std::char_traits<char>::eof()) throw DataError("truncated binary file");
  if (n == 0) throw DataError("empty file: no data rows");
  if (d == 0) throw DataError("binary file declares zero embedding dimensions");
  Dataset ds;
  ds.embeddings.resize(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < d; ++k) ds.embeddings(i, k) = get_f64(in);
  ds.confidences.resize(n);
  ds.outcomes.resize(n);
  for (Index i = 0; i < n; ++i) ds.confidences(i) = get_f64(in);
  for (Index i = 0; i < n; ++i) ds.outcomes(i) = get_f64(in);
  if (flags & kHasTrueField) {
    ds.true_field = Eigen::VectorXd(n);
    for (Index i = 0; i < n; ++i) (*ds.true_field)(i) = get_f64(in);
  }
  if (flags & kHasGroups) {
    ds.group_labels = Eigen::VectorXi(n);
    for (Index i = 0; i < n; ++i)
      (*ds.group_labels)(i) = static_cast<int>(static_cast<std::int64_t>(get_u64(in)));
  }
  ds.validate();
  return ds;
}

void save_csv(const Dataset& ds, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "f,y";
  for (Index k = 0; k < ds.dim(); ++k) out << ",x" << k;
  if (ds.true_field) out << ",delta_true";
  if (ds.group_labels) out << ",group";
  out << "\n" << std::setprecision(17);
  for (Index i = 0; i < ds.size(); ++i) {
    out << ds.confidences(i) << "," << ds.outcomes(i);
    for (Index k = 0; k < ds.dim(); ++k) out << "," << ds.embeddings(i, k);
    if (ds.true_field) out << "," << (*ds.true_field)(i);
    if (ds.group_labels) out << "," << (*ds.group_labels)(i);
    out << "\n";
  }
}

void save_jsonl(const Dataset& ds, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  std::vector<double> x(static_cast<std::size_t>(ds.dim()));
  for (Index i = 0; i < ds.size(); ++i) {
    for (Index k = 0; k < ds.dim(); ++k) x[static_cast<std::size_t>(k)] = ds.embeddings(i, k);
    json obj{{"f", ds.confidences(i)}, {"y", ds.outcomes(i)}, {"x", x}};
    if (ds.true_field) obj["delta_true"] = (*ds.true_field)(i);
    if (ds.group_labels) obj["group"] = (*ds.group_labels)(i);
    out << obj.dump() << "\n";
  }
}

}  // namespace

void Dataset::validate() const {
  const Index n = size();
  if (n < 1) throw DataError("dataset has no rows");
  if (embeddings.rows() != n || outcomes.size() != n) throw DataError("row counts differ between columns");
  if (embeddings.cols() < 1) throw DataError("embeddings have zero dimensions");
  if (true_field && true_field->size() != n) throw DataError("true_field length differs from n");
  if (group_labels && group_labels->size() != n) throw DataError("group_labels length differs from n");
  for (Index i = 0; i < n; ++i) {
    check_row(i, confidences(i), outcomes(i));
    if (!embeddings.row(i).allFinite()) throw DataError(row_tag(i) + ": non-finite embedding value");
  }
}

Dataset Dataset::subset(std::span<const Index> rows) const {
  Dataset out;
  const auto m = static_cast<Index>(rows.size());
  out.embeddings.resize(m, dim());
  out.confidences.resize(m);
  out.outcomes.resize(m);
  if (true_field) out.true_field = Eigen::VectorXd(m);
  if (group_labels) out.group_labels = Eigen::VectorXi(m);
  for (Index i = 0; i < m; ++i) {
    const Index src = rows[static_cast<std::size_t>(i)];
    out.embeddings.row(i) = embeddings.row(src);
    out.confidences(i) = confidences(src);
    out.outcomes(i) = outcomes(src);
    if (true_field) (*out.true_field)(i) = (*true_field)(src);
    if (group_labels) (*out.group_labels)(i) = (*group_labels)(src);
  }
  out.group_names = group_names;
  return out;
}

FileFormat parse_format(const std::string& name) {
  if (name == "csv") return FileFormat::Csv;
  if (name == "jsonl") return FileFormat::Jsonl;
  if (name == "bin" || name == "binary" || name == "binary-columnar") return FileFormat::Binary;
  throw ConfigError("unknown format '" + name + "' (expected csv, jsonl or bin)");
}

std::string format_name(FileFormat format) {
  switch (format) {
    case FileFormat::Csv: return "csv";
    case FileFormat::Jsonl: return "jsonl";
    case FileFormat::Binary: return "bin";
  }
  return "bin";
}

FileFormat format_from_path(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return FileFormat::Csv;
  if (ext == ".jsonl") return FileFormat::Jsonl;
  return FileFormat::Binary;
}

Dataset load_triples(const fs::path& path, FileFormat format) {
  if (!fs::exists(path)) throw DataError("no such file: " + path.string());
  Dataset ds;
  switch (format) {
    case FileFormat::Csv: ds = load_csv(path); break;
    case FileFormat::Jsonl: ds = load_jsonl(path); break;
    case FileFormat::Binary: ds = load_binary(path); break;
  }
  read_sidecar(ds, path);
  return ds;
}

void save_triples(const Dataset& ds, const fs::path& path, FileFormat format) {
  ds.validate();
  switch (format) {
    case FileFormat::Csv: save_csv(ds, path); break;
    case FileFormat::Jsonl: save_jsonl(ds, path); break;
    case FileFormat::Binary: save_binary(ds, path); break;
  }
  write_sidecar(ds, path);
}

void SplitSpec::validate() const {
  if (!(train_frac > 0.0) || !(val_frac > 0.0) || !(test_frac > 0.0)) {
    throw ConfigError("split fractions must be positive");
  }
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
}

SplitIndices split_indices(Index n, const SplitSpec& spec) {
  spec.validate();
  if (n < 10) throw DataError("split needs at least 10 rows, got " + std::to_string(n));
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(spec.seed, Stream::Split);
  rng.shuffle(perm.begin(), perm.end());

  // The 1e-9 slack keeps products like 10000 * 0.7 from flooring one short.
  const auto n_val = static_cast<Index>(std::floor(static_cast<double>(n) * spec.val_frac + 1e-9));
  const auto n_test = static_cast<Index>(std::floor(static_cast<double>(n) * spec.test_frac + 1e-9));
  const Index n_train = n - n_val - n_test;

  SplitIndices out;
  const auto begin = perm.begin();
  out.train.assign(begin, begin + n_train);
  out.val.assign(begin + n_train, begin + n_train + n_val);
  out.test.assign(begin + n_train + n_val, perm.end());
  return out;
}

Splits split(const Dataset& ds, const SplitSpec& spec) {
  const auto idx = split_indices(ds.size(), spec);
  return {ds.subset(idx.train), ds.subset(idx.val), ds.subset(idx.test)};
}

NeighbourBank sample_bank(const Dataset& train, Index cap, std::uint64_t seed) {
  if (cap < 1) throw ConfigError("bank cap must be at least 1");
  const Index n = train.size();
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (n > cap) {
    // Partial Fisher-Yates: the first cap slots are a uniform sample.
    Rng rng(seed, Stream::Bank);
    for (Index i = 0; i < cap; ++i) {
      const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(cap));
    std::sort(idx.begin(), idx.end());
  }
  NeighbourBank bank;
  bank.cap = cap;
  const auto b = static_cast<Index>(idx.size());
  bank.embeddings.resize(b, train.dim());
  bank.residuals.resize(b);
  for (Index i = 0; i < b; ++i) {
    const Index src = idx[static_cast<std::size_t>(i)];
    bank.embeddings.row(i) = train.embeddings.row(src);
    bank.residuals(i) = train.outcomes(src) - train.confidences(src);
  }
  bank.source_indices = std::move(idx);
  return bank;
}

}  // namespace calibfield
