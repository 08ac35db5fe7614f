#include "bivm/model.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace bivm {

namespace {

bool divides_either_way(int a, int b) { return a % b == 0 || b % a == 0; }

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::string t(s);
  for (auto& ch : t)
    if (ch == ',') ch = ' ';
  std::istringstream is(t);
  int v;
  while (is >> v) out.push_back(v);
  BIVM_CHECK(!out.empty(), "no integers in value for '" + key + "'");
  return out;
}

bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "1" || s == "true" || s == "on") return true;
  if (s == "0" || s == "false" || s == "off") return false;
  throw Error("bad boolean for '" + key + "': " + s);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

void ModelConfig::validate() const {
  BIVM_CHECK(backbone == "ebb" || backbone == "mbv3", "unknown backbone: " + backbone);
  BIVM_CHECK(input_scale > 0.0, "input_scale must be positive");
  BIVM_CHECK(assumed_density > 0.0 && assumed_density <= 1.0,
             "assumed_density must lie in (0,1]");
  BIVM_CHECK(ladder.size() == 5, "decoder ladder needs five widths");
  for (int c : ladder) BIVM_CHECK(c > 0, "ladder widths must be positive");
  if (backbone != "ebb") return;

  BIVM_CHECK(stem_out > 0, "stem width must be positive");
  BIVM_CHECK(blocks.size() >= 3, "encoder needs at least three blocks");
  BIVM_CHECK(blocks[0].c_in == stem_out, "first block must consume the stem width");
  int strides = 1;
  for (size_t i = 0; i < blocks.size(); ++i) {
    const EbbSpec& b = blocks[i];
    BIVM_CHECK(b.c_in > 0 && b.c_head > 0 && b.c_mid > 0, "block widths must be positive");
    BIVM_CHECK(b.stride == 1 || b.stride == 2, "block stride must be 1 or 2");
    BIVM_CHECK(b.dilation >= 1, "block dilation must be >= 1");
    BIVM_CHECK(divides_either_way(b.c_in, b.c_head), "head widths must nest");
    BIVM_CHECK(divides_either_way(b.c_head, b.c_mid), "mid widths must nest");
    BIVM_CHECK(divides_either_way(b.c_in, b.c_mid), "cross shortcut widths must nest");
    if (i > 0)
      BIVM_CHECK(b.c_in == blocks[i - 1].c_head, "block widths must chain");
    strides *= b.stride;
  }
  // Skips are taken after blocks 0 and 2, so those two must carry the 1/4 and
  // 1/8 steps and exactly one later block reaches 1/16.
  BIVM_CHECK(blocks[0].stride == 2, "block 1 must stride to 1/4");
  BIVM_CHECK(blocks[1].stride == 1, "block 2 must keep 1/4");
  BIVM_CHECK(blocks[2].stride == 2, "block 3 must stride to 1/8");
  BIVM_CHECK(strides == 8, "encoder blocks must total stride 8 after the stem");

  int c = blocks.back().c_head;
  for (const SubSpec& t : trailing) {
    BIVM_CHECK(t.c_in == c, "trailing widths must chain");
    BIVM_CHECK(t.c_out > 0 && t.dilation >= 1, "bad trailing row");
    BIVM_CHECK(divides_either_way(t.c_in, t.c_out), "trailing widths must nest");
    c = t.c_out;
  }
  BIVM_CHECK(aspp_out > 0, "aspp width must be positive");
  BIVM_CHECK(ladder[0] == aspp_out,
             "ladder must start at the aspp width (bottleneck keeps it)");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "preset=" << preset << '\n'
     << "backbone=" << backbone << '\n'
     << "full_precision=" << (full_precision ? 1 : 0) << '\n'
     << "sparse_decoder=" << (sparse_decoder ? 1 : 0) << '\n'
     << "recurrence=" << (recurrence ? 1 : 0) << '\n'
     << "input_scale=" << fmt_double(input_scale) << '\n'
     << "assumed_density=" << fmt_double(assumed_density) << '\n'
     << "stem_out=" << stem_out << '\n';
  for (const EbbSpec& b : blocks)
    os << "block=" << b.c_in << ',' << b.c_head << ',' << b.c_mid << ',' << b.stride
       << ',' << b.dilation << '\n';
  for (const SubSpec& t : trailing)
    os << "trailing=" << t.c_in << ',' << t.c_out << ',' << t.dilation << '\n';
  os << "aspp_out=" << aspp_out << '\n';
  os << "ladder=";
  for (size_t i = 0; i < ladder.size(); ++i) os << (i ? "," : "") << ladder[i];
  os << '\n';
  return os.str();
}

uint64_t ModelConfig::digest() const { return fnv1a(canonical()); }

ModelConfig ModelConfig::preset_config(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  if (name == "bivm" || name == "bivm-fp") {
    c.backbone = "ebb";
    c.stem_out = 16;
    c.blocks = {{16, 32, 64, 2, 1},
                {32, 64, 128, 1, 1},
                {64, 64, 128, 2, 1},
                {64, 128, 256, 2, 1},
                {128, 128, 256, 1, 2}};
    c.trailing = {{128, 256, 2}, {256, 1024, 2}};
    c.aspp_out = 128;
    c.ladder = {128, 80, 40, 32, 16};
    if (name == "bivm-fp") {
      c.full_precision = true;
      c.sparse_decoder = false;
    }
  } else if (name == "baseline-1bit" || name == "rvm-ref") {
    c.backbone = "mbv3";
    c.blocks.clear();
    c.trailing.clear();
    c.aspp_out = 128;
    c.ladder = {128, 80, 40, 32, 16};
    c.sparse_decoder = false;
    if (name == "rvm-ref") c.full_precision = true;
  } else {
    throw Error("unknown preset: " + name);
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg = preset_config("bivm");
  bool blocks_reset = false, trailing_reset = false;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') continue;  // section headers are cosmetic
    size_t eq = line.find('=');
    BIVM_CHECK(eq != std::string::npos,
               "config line " + std::to_string(lineno) + " is not key=value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key == "preset") {
      cfg = preset_config(val);
      blocks_reset = trailing_reset = false;
    } else if (key == "backbone") {
      cfg.backbone = val;
    } else if (key == "full_precision") {
      cfg.full_precision = parse_bool(val, key);
    } else if (key == "sparse_decoder") {
      cfg.sparse_decoder = parse_bool(val, key);
    } else if (key == "recurrence") {
      cfg.recurrence = parse_bool(val, key);
    } else if (key == "input_scale") {
      cfg.input_scale = std::stod(val);
    } else if (key == "assumed_density") {
      cfg.assumed_density = std::stod(val);
    } else if (key == "stem_out") {
      cfg.stem_out = std::stoi(val);
    } else if (key == "aspp_out") {
      cfg.aspp_out = std::stoi(val);
    } else if (key == "block") {
      if (!blocks_reset) {
        cfg.blocks.clear();
        blocks_reset = true;
      }
      auto v = parse_int_list(val, key);
      BIVM_CHECK(v.size() == 5, "block rows are c_in,c_head,c_mid,stride,dilation");
      cfg.blocks.push_back({v[0], v[1], v[2], v[3], v[4]});
    } else if (key == "trailing") {
      if (!trailing_reset) {
        cfg.trailing.clear();
        trailing_reset = true;
      }
      auto v = parse_int_list(val, key);
      BIVM_CHECK(v.size() == 3, "trailing rows are c_in,c_out,dilation");
      cfg.trailing.push_back({v[0], v[1], v[2]});
    } else if (key == "ladder") {
      cfg.ladder = parse_int_list(val, key);
    } else {
      throw Error("unknown config key '" + key + "' on line " + std::to_string(lineno));
    }
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  BIVM_CHECK(in.good(), "cannot open config file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse(os.str());
}

int64_t param_count(const std::vector<ParamRefT<float>>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.var->val().size();
  return n;
}

}  // namespace bivm
