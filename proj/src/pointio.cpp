#include "mcft/pointio.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mcft {

namespace {

std::string line_err(const std::string& path, int line, const std::string& what) {
  return path + ":" + std::to_string(line) + ": " + what;
}

bool parse3(const std::string& line, double out[3]) {
  std::istringstream ss(line);
  if (!(ss >> out[0] >> out[1] >> out[2])) return false;
  std::string rest;
  if (ss >> rest) return false;  // trailing tokens
  return true;
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

PointCloud from_rows(std::vector<double> rows, const std::string& id) {
  const int M = static_cast<int>(rows.size() / 3);
  if (M == 0) throw validation_error("empty vertex set in " + id);
  PointCloud pc;
  pc.points = Tensor({M, 3}, std::move(rows));
  pc.id = id;
  return pc;
}

PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open " + path);
  std::vector<double> rows;
  std::string line;
  int ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (blank(line)) continue;
    double p[3];
    if (!parse3(line, p)) throw parse_error(line_err(path, ln, "expected 'x y z'"));
    rows.insert(rows.end(), {p[0], p[1], p[2]});
  }
  return from_rows(std::move(rows), fs::path(path).stem().string());
}

PointCloud load_off(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open " + path);
  std::string line;
  int ln = 0;
  auto next_line = [&](const char* what) {
    while (std::getline(in, line)) {
      ++ln;
      if (!blank(line) && line[0] != '#') return;
    }
    throw parse_error(line_err(path, ln, std::string("unexpected end of file, wanted ") + what));
  };
  next_line("OFF header");
  std::string head = line;
  // Trim trailing whitespace/CR.
  while (!head.empty() && std::isspace(static_cast<unsigned char>(head.back()))) head.pop_back();
  long nv = -1, nf = 0, ne = 0;
  if (head == "OFF") {
    next_line("counts");
    std::istringstream ss(line);
    if (!(ss >> nv >> nf >> ne)) throw parse_error(line_err(path, ln, "bad counts line"));
  } else if (head.rfind("OFF", 0) == 0) {
    // Counts packed onto the header line ("OFF 8 6 0").
    std::istringstream ss(head.substr(3));
    if (!(ss >> nv >> nf >> ne)) throw parse_error(line_err(path, ln, "bad OFF header"));
  } else {
    throw parse_error(line_err(path, ln, "missing OFF header"));
  }
  if (nv < 0) throw parse_error(line_err(path, ln, "negative vertex count"));
  std::vector<double> rows;
  rows.reserve(static_cast<size_t>(nv) * 3);
  for (long i = 0; i < nv; ++i) {
    next_line("vertex");
    std::istringstream ss(line);
    double x, y, z;
    if (!(ss >> x >> y >> z)) throw parse_error(line_err(path, ln, "bad vertex row"));
    rows.insert(rows.end(), {x, y, z});
  }
  // Faces, if any, are intentionally not read.
  return from_rows(std::move(rows), fs::path(path).stem().string());
}

PointCloud load_ply(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open " + path);
  std::string line;
  int ln = 0;
  auto getline_req = [&](const char* what) {
    if (!std::getline(in, line))
      throw parse_error(line_err(path, ln, std::string("unexpected end of file, wanted ") + what));
    ++ln;
  };
  getline_req("ply magic");
  if (line.rfind("ply", 0) != 0) throw parse_error(line_err(path, ln, "missing 'ply' magic"));
  getline_req("format");
  if (line.rfind("format ascii", 0) != 0)
    throw parse_error(line_err(path, ln, "only ascii PLY is supported"));

  struct Element {
    std::string name;
    long count = 0;
    std::vector<std::string> props;
  };
  std::vector<Element> elements;
  while (true) {
    getline_req("header");
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "comment") continue;
    if (tok == "end_header") break;
    if (tok == "element") {
      Element e;
      if (!(ss >> e.name >> e.count)) throw parse_error(line_err(path, ln, "bad element line"));
      elements.push_back(e);
    } else if (tok == "property") {
      if (elements.empty()) throw parse_error(line_err(path, ln, "property before element"));
      std::string type, name;
      ss >> type;
      if (type == "list") {
        std::string t2, t3;
        ss >> t2 >> t3 >> name;
      } else {
        ss >> name;
      }
      elements.back().props.push_back(name);
    } else {
      throw parse_error(line_err(path, ln, "unrecognized header token '" + tok + "'"));
    }
  }

  std::vector<double> rows;
  for (const Element& e : elements) {
    if (e.name == "vertex") {
      int ix = -1, iy = -1, iz = -1;
      for (size_t i = 0; i < e.props.size(); ++i) {
        if (e.props[i] == "x") ix = static_cast<int>(i);
        if (e.props[i] == "y") iy = static_cast<int>(i);
        if (e.props[i] == "z") iz = static_cast<int>(i);
      }
      if (ix < 0 || iy < 0 || iz < 0)
        throw parse_error(path + ": vertex element lacks x/y/z properties");
      for (long i = 0; i < e.count; ++i) {
        getline_req("vertex");
        std::istringstream ss(line);
        std::vector<double> vals(e.props.size());
        for (double& v : vals)
          if (!(ss >> v)) throw parse_error(line_err(path, ln, "bad vertex row"));
        rows.insert(rows.end(), {vals[ix], vals[iy], vals[iz]});
      }
    } else {
      for (long i = 0; i < e.count; ++i) getline_req(e.name.c_str());
    }
  }
  return from_rows(std::move(rows), fs::path(path).stem().string());
}

}  // namespace

PointFileFormat point_format_from_name(const std::string& name) {
  if (name == "xyz-ascii" || name == "xyz") return PointFileFormat::xyz_ascii;
  if (name == "off") return PointFileFormat::off;
  if (name == "ply-ascii" || name == "ply") return PointFileFormat::ply_ascii;
  throw config_error("unknown point file format: " + name);
}

PointCloud load_point_file(const std::string& path, PointFileFormat format) {
  switch (format) {
    case PointFileFormat::xyz_ascii:
      return load_xyz(path);
    case PointFileFormat::off:
      return load_off(path);
    case PointFileFormat::ply_ascii:
      return load_ply(path);
  }
  throw config_error("unhandled point file format");
}

void save_xyz(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot write " + path);
  char buf[128];
  for (int i = 0; i < cloud.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", cloud.points.at(i, 0),
                  cloud.points.at(i, 1), cloud.points.at(i, 2));
    out << buf;
  }
}

Dataset make_synthetic_dataset(const SyntheticSpec& spec, int train_per_class,
                               int test_per_class) {
  SyntheticSpec train_spec = spec;
  train_spec.seed = mix_seed({spec.seed, hash_str("train")});
  SyntheticSpec test_spec = spec;
  test_spec.seed = mix_seed({spec.seed, hash_str("test")});

  Dataset ds;
  ds.class_names = spec.class_catalog;
  auto train = generate_dataset(train_spec, train_per_class, "train_");
  auto test = generate_dataset(test_spec, test_per_class, "test_");
  for (auto& pc : train) {
    ds.train_indices.push_back(static_cast<int>(ds.clouds.size()));
    ds.clouds.push_back(std::move(pc));
  }
  for (auto& pc : test) {
    ds.test_indices.push_back(static_cast<int>(ds.clouds.size()));
    ds.clouds.push_back(std::move(pc));
  }
  return ds;
}

namespace {

void export_split(const fs::path& dir, const Dataset& ds, const std::vector<int>& idx) {
  fs::create_directories(dir);
  std::ofstream labels(dir / "labels.csv");
  labels << "id,label,class_name\n";
  for (int i : idx) {
    const PointCloud& pc = ds.clouds[i];
    save_xyz((dir / (pc.id + ".xyz")).string(), pc);
    labels << pc.id << "," << pc.label.value_or(-1) << ","
           << (pc.label ? ds.class_names[*pc.label] : "") << "\n";
  }
}

void import_split(const fs::path& dir, Dataset& ds, std::vector<int>& idx) {
  std::ifstream labels(dir / "labels.csv");
  if (!labels) throw parse_error("cannot open " + (dir / "labels.csv").string());
  std::string line;
  std::getline(labels, line);  // header
  int ln = 1;
  while (std::getline(labels, line)) {
    ++ln;
    if (blank(line)) continue;
    std::istringstream ss(line);
    std::string id, label_s, cname;
    if (!std::getline(ss, id, ',') || !std::getline(ss, label_s, ','))
      throw parse_error(line_err((dir / "labels.csv").string(), ln, "bad row"));
    std::getline(ss, cname, ',');
    PointCloud pc = load_point_file((dir / (id + ".xyz")).string(), PointFileFormat::xyz_ascii);
    pc.id = id;
    const int label = std::stoi(label_s);
    if (label >= 0) pc.label = label;
    idx.push_back(static_cast<int>(ds.clouds.size()));
    ds.clouds.push_back(std::move(pc));
  }
}

}  // namespace

void export_dataset(const std::string& dir, const Dataset& ds) {
  fs::create_directories(dir);
  json meta;
  meta["class_names"] = ds.class_names;
  std::ofstream(fs::path(dir) / "dataset.json") << meta.dump(2) << "\n";
  export_split(fs::path(dir) / "train", ds, ds.train_indices);
  export_split(fs::path(dir) / "test", ds, ds.test_indices);
}

Dataset import_dataset(const std::string& dir) {
  std::ifstream meta_in(fs::path(dir) / "dataset.json");
  if (!meta_in) throw parse_error("cannot open " + dir + "/dataset.json");
  json meta = json::parse(meta_in);
  Dataset ds;
  ds.class_names = meta.at("class_names").get<std::vector<std::string>>();
  import_split(fs::path(dir) / "train", ds, ds.train_indices);
  import_split(fs::path(dir) / "test", ds, ds.test_indices);
  return ds;
}

}  // namespace mcft
