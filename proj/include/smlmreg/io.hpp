#pragma once

#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "smlmreg/core.hpp"

namespace smlmreg {

// ---------------------------------------------------------------------------
// Number formatting: shortest round-trip representation.
// ---------------------------------------------------------------------------

inline std::string format_real(double v) {
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

inline double parse_real(std::string_view s, std::size_t line) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || s.empty()) {
        throw ParseError("cannot parse number '" + std::string(s) + "'", line);
    }
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

inline std::string trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

inline std::ifstream open_input(const std::string& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream in(path, mode);
    if (!in) throw ValidationError("cannot open '" + path + "' for reading");
    return in;
}

inline std::ofstream open_output(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream out(path, mode | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    return out;
}

/// Reads a CSV table with a mandatory header, checking the header against the
/// expected column names. Blank lines are skipped. Returns rows of numbers.
inline std::vector<std::vector<double>> read_numeric_table(std::istream& in,
                                                           const std::vector<std::string>& required,
                                                           const std::vector<std::string>& optional,
                                                           std::vector<std::string>* header_out = nullptr) {
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        for (auto f : split_csv(line)) header.push_back(trim(f));
        break;
    }
    if (header.empty()) throw ParseError("missing header", line_no);
    if (header.size() < required.size() || header.size() > required.size() + optional.size()) {
        throw ParseError("unexpected number of header columns", line_no);
    }
    for (std::size_t c = 0; c < header.size(); ++c) {
        const std::string& want = c < required.size() ? required[c] : optional[c - required.size()];
        if (header[c] != want) throw ParseError("header column " + std::to_string(c + 1) + " should be '" + want + "'", line_no);
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != header.size()) {
            throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                                 std::to_string(fields.size()),
                             line_no);
        }
        std::vector<double> row;
        row.reserve(fields.size());
        for (auto f : fields) row.push_back(parse_real(f, line_no));
        rows.push_back(std::move(row));
    }
    if (header_out) *header_out = header;
    return rows;
}

// ---------------------------------------------------------------------------
// Observed clouds: x,y,z,sxx,syy,szz[,sxy,sxz,syz]
// ---------------------------------------------------------------------------

inline ObservedCloud read_cloud_csv(std::istream& in, const std::string& id) {
    std::vector<std::string> header;
    const auto rows = read_numeric_table(in, {"x", "y", "z", "sxx", "syy", "szz"}, {"sxy", "sxz", "syz"}, &header);
    if (header.size() != 6 && header.size() != 9) {
        throw ParseError("off-diagonal columns must be given all together (sxy,sxz,syz)", 1);
    }
    std::vector<Point3> pts;
    std::vector<CovMat3> covs;
    pts.reserve(rows.size());
    covs.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& v = rows[r];
        pts.emplace_back(v[0], v[1], v[2]);
        const bool full = v.size() == 9;
        const auto c = CovMat3::from_entries(v[3], v[4], v[5], full ? v[6] : 0.0, full ? v[7] : 0.0,
                                             full ? v[8] : 0.0);
        if (!c.is_psd()) throw NotPSD("row " + std::to_string(r) + ": noise covariance is not PSD", r);
        covs.push_back(c);
    }
    if (pts.empty()) throw TooFewPoints("cloud '" + id + "' has no rows");
    return ObservedCloud(id, std::move(pts), std::move(covs));
}

inline ObservedCloud parse_cloud_csv(const std::string& path, std::string id = {}) {
    auto in = open_input(path);
    if (id.empty()) id = path;
    return read_cloud_csv(in, id);
}

/// Writes the 9-column form when any off-diagonal is non-zero, else the 6-column form.
inline void write_cloud_csv(std::ostream& out, const ObservedCloud& cloud) {
    bool full = false;
    for (const auto& c : cloud.noise_covs()) {
        if (c.xy() != 0.0 || c.xz() != 0.0 || c.yz() != 0.0) full = true;
    }
    out << (full ? "x,y,z,sxx,syy,szz,sxy,sxz,syz\n" : "x,y,z,sxx,syy,szz\n");
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& p = cloud.point(i);
        const auto& c = cloud.noise(i);
        out << format_real(p.x()) << ',' << format_real(p.y()) << ',' << format_real(p.z()) << ','
            << format_real(c.xx()) << ',' << format_real(c.yy()) << ',' << format_real(c.zz());
        if (full) out << ',' << format_real(c.xy()) << ',' << format_real(c.xz()) << ',' << format_real(c.yz());
        out << '\n';
    }
}

inline void write_cloud_csv(const std::string& path, const ObservedCloud& cloud) {
    auto out = open_output(path);
    write_cloud_csv(out, cloud);
}

// ---------------------------------------------------------------------------
// Transforms: r00..r22,tx,ty,tz
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& transform_columns() {
    static const std::vector<std::string> cols{"r00", "r01", "r02", "r10", "r11", "r12",
                                               "r20", "r21", "r22", "tx",  "ty",  "tz"};
    return cols;
}

inline void write_transforms_csv(std::ostream& out, const std::vector<RigidTransform>& transforms) {
    const auto& cols = transform_columns();
    for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
    out << '\n';
    for (const auto& t : transforms) {
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) out << format_real(t.rotation()(r, c)) << ',';
        }
        out << format_real(t.translation().x()) << ',' << format_real(t.translation().y()) << ','
            << format_real(t.translation().z()) << '\n';
    }
}

inline void export_transforms(const std::vector<RigidTransform>& transforms, const std::string& path) {
    auto out = open_output(path);
    write_transforms_csv(out, transforms);
}

inline std::vector<RigidTransform> read_transforms_csv(std::istream& in) {
    const auto rows = read_numeric_table(in, transform_columns(), {});
    std::vector<RigidTransform> out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& v = rows[r];
        Mat3 rot;
        rot << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
        try {
            out.emplace_back(rot, Vec3(v[9], v[10], v[11]));
        } catch (const NotARotation& e) {
            throw NotARotation("transform row " + std::to_string(r) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<RigidTransform> parse_transforms(const std::string& path) {
    auto in = open_input(path);
    return read_transforms_csv(in);
}

// ---------------------------------------------------------------------------
// GMM: mu_x,mu_y,mu_z,sigma2,weight (outlier mass is 1 − Σ weight)
// ---------------------------------------------------------------------------

inline void write_gmm_csv(std::ostream& out, const GmmModel& gmm) {
    out << "mu_x,mu_y,mu_z,sigma2,weight\n";
    for (std::size_t k = 0; k < gmm.size(); ++k) {
        out << format_real(gmm.means[k].x()) << ',' << format_real(gmm.means[k].y()) << ','
            << format_real(gmm.means[k].z()) << ',' << format_real(gmm.variances[k]) << ','
            << format_real(gmm.weights[k]) << '\n';
    }
}

inline void export_gmm(const GmmModel& gmm, const std::string& path) {
    auto out = open_output(path);
    write_gmm_csv(out, gmm);
}

/// The outlier weight is recovered as 1 − Σ weight; the hull volume is not part
/// of the file and must be supplied (it is recorded in the run manifest).
inline GmmModel read_gmm_csv(std::istream& in, double hull_volume) {
    const auto rows = read_numeric_table(in, {"mu_x", "mu_y", "mu_z", "sigma2", "weight"}, {});
    if (rows.empty()) throw ParseError("GMM file has no components");
    GmmModel g;
    double sum = 0.0;
    for (const auto& v : rows) {
        g.means.emplace_back(v[0], v[1], v[2]);
        g.variances.push_back(v[3]);
        g.weights.push_back(v[4]);
        sum += v[4];
    }
    g.weights.push_back(std::max(0.0, 1.0 - sum));
    g.hull_volume = hull_volume;
    return g;
}

inline GmmModel parse_gmm(const std::string& path, double hull_volume) {
    auto in = open_input(path);
    return read_gmm_csv(in, hull_volume);
}

inline void write_trace_csv(std::ostream& out, const std::vector<double>& values) {
    out << "iteration,loglik\n";
    for (std::size_t i = 0; i < values.size(); ++i) out << i << ',' << format_real(values[i]) << '\n';
}

inline void write_points_csv(std::ostream& out, const std::vector<Point3>& pts) {
    out << "x,y,z\n";
    for (const auto& p : pts) out << format_real(p.x()) << ',' << format_real(p.y()) << ',' << format_real(p.z()) << '\n';
}

inline std::vector<Point3> read_points_csv(std::istream& in) {
    const auto rows = read_numeric_table(in, {"x", "y", "z"}, {});
    std::vector<Point3> out;
    for (const auto& v : rows) out.emplace_back(v[0], v[1], v[2]);
    return out;
}

// ---------------------------------------------------------------------------
// PLY (ASCII and binary little-endian)
// ---------------------------------------------------------------------------

struct PlyMesh {
    std::vector<Point3> vertices;
    std::vector<std::array<std::uint32_t, 3>> triangles;  // fans of larger polygons are split
};

namespace detail {

struct PlyProperty {
    std::string name;
    std::string type;        // scalar type, or the item type of a list
    std::string count_type;  // non-empty for list properties
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

inline std::size_t ply_type_size(const std::string& t) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" || t == "float32") return 4;
    if (t == "double" || t == "float64") return 8;
    throw ParseError("unknown PLY property type '" + t + "'");
}

template <typename T>
T read_le(std::istream& in) {
    static_assert(std::endian::native == std::endian::little, "binary PLY reader assumes a little-endian host");
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("truncated binary PLY payload");
    return v;
}

inline double read_binary_scalar(std::istream& in, const std::string& t) {
    if (t == "char" || t == "int8") return read_le<std::int8_t>(in);
    if (t == "uchar" || t == "uint8") return read_le<std::uint8_t>(in);
    if (t == "short" || t == "int16") return read_le<std::int16_t>(in);
    if (t == "ushort" || t == "uint16") return read_le<std::uint16_t>(in);
    if (t == "int" || t == "int32") return read_le<std::int32_t>(in);
    if (t == "uint" || t == "uint32") return read_le<std::uint32_t>(in);
    if (t == "float" || t == "float32") return read_le<float>(in);
    if (t == "double" || t == "float64") return read_le<double>(in);
    throw ParseError("unknown PLY property type '" + t + "'");
}

}  // namespace detail

inline PlyMesh read_ply(std::istream& in) {
    std::string line;
    std::getline(in, line);
    if (trim(line) != "ply") throw ParseError("missing 'ply' magic", 1);
    std::size_t line_no = 1;
    std::string format;
    std::vector<detail::PlyElement> elements;
    bool header_done = false;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string kw;
        ls >> kw;
        if (kw.empty() || kw == "comment" || kw == "obj_info") continue;
        if (kw == "format") {
            std::string version;
            ls >> format >> version;
        } else if (kw == "element") {
            detail::PlyElement e;
            long long count = -1;
            ls >> e.name >> count;
            if (!ls || count < 0) throw ParseError("malformed element line", line_no);
            e.count = static_cast<std::size_t>(count);
            elements.push_back(std::move(e));
        } else if (kw == "property") {
            if (elements.empty()) throw ParseError("property before any element", line_no);
            detail::PlyProperty p;
            std::string type;
            ls >> type;
            if (type == "list") {
                ls >> p.count_type >> p.type >> p.name;
                detail::ply_type_size(p.count_type);
            } else {
                p.type = type;
                ls >> p.name;
            }
            if (!ls || p.name.empty()) throw ParseError("malformed property line", line_no);
            detail::ply_type_size(p.type);
            elements.back().props.push_back(std::move(p));
        } else if (kw == "end_header") {
            header_done = true;
            break;
        } else {
            throw ParseError("unexpected header keyword '" + kw + "'", line_no);
        }
    }
    if (!header_done) throw ParseError("header is not terminated by end_header", line_no);
    const bool ascii = format == "ascii";
    if (!ascii && format != "binary_little_endian") {
        throw ParseError("unsupported PLY format '" + format + "'");
    }

    PlyMesh mesh;
    for (const auto& el : elements) {
        int ix = -1, iy = -1, iz = -1, iface = -1;
        for (std::size_t p = 0; p < el.props.size(); ++p) {
            const auto& n = el.props[p].name;
            if (el.name == "vertex" && el.props[p].count_type.empty()) {
                if (n == "x") ix = static_cast<int>(p);
                if (n == "y") iy = static_cast<int>(p);
                if (n == "z") iz = static_cast<int>(p);
            }
            if (el.name == "face" && !el.props[p].count_type.empty() &&
                (n == "vertex_indices" || n == "vertex_index")) {
                iface = static_cast<int>(p);
            }
        }
        if (el.name == "vertex" && (ix < 0 || iy < 0 || iz < 0)) {
            throw ParseError("vertex element lacks x, y or z");
        }
        for (std::size_t r = 0; r < el.count; ++r) {
            Point3 v = Point3::Zero();
            std::vector<std::uint32_t> poly;
            std::istringstream row;
            if (ascii) {
                do {
                    if (!std::getline(in, line)) {
                        throw ParseError("element '" + el.name + "' declares " + std::to_string(el.count) +
                                         " rows but the file ends after " + std::to_string(r));
                    }
                    ++line_no;
                } while (trim(line).empty());
                row.str(line);
            }
            auto next_value = [&](const std::string& type) -> double {
                if (!ascii) return detail::read_binary_scalar(in, type);
                std::string tok;
                if (!(row >> tok)) throw ParseError("too few values on row", line_no);
                return parse_real(tok, line_no);
            };
            for (std::size_t p = 0; p < el.props.size(); ++p) {
                const auto& prop = el.props[p];
                if (prop.count_type.empty()) {
                    const double val = next_value(prop.type);
                    if (static_cast<int>(p) == ix) v.x() = val;
                    if (static_cast<int>(p) == iy) v.y() = val;
                    if (static_cast<int>(p) == iz) v.z() = val;
                } else {
                    const double cnt = next_value(prop.count_type);
                    if (cnt < 0) throw ParseError("negative list length", line_no);
                    for (std::size_t c = 0; c < static_cast<std::size_t>(cnt); ++c) {
                        const double idx = next_value(prop.type);
                        if (static_cast<int>(p) == iface) poly.push_back(static_cast<std::uint32_t>(idx));
                    }
                }
            }
            if (el.name == "vertex") mesh.vertices.push_back(v);
            if (el.name == "face" && poly.size() >= 3) {
                for (std::size_t c = 1; c + 1 < poly.size(); ++c) {
                    mesh.triangles.push_back({poly[0], poly[c], poly[c + 1]});
                }
            }
        }
    }
    for (const auto& t : mesh.triangles) {
        for (auto idx : t) {
            if (idx >= mesh.vertices.size()) throw ParseError("face references a missing vertex");
        }
    }
    return mesh;
}

inline PlyMesh parse_ply_mesh(const std::string& path) {
    auto in = open_input(path, std::ios::in | std::ios::binary);
    return read_ply(in);
}

/// Vertex positions only.
inline std::vector<Point3> parse_ply(const std::string& path) { return parse_ply_mesh(path).vertices; }

enum class PlyEncoding { ascii, binary_little_endian };

/// Positions only, stored as doubles.
inline void write_ply(std::ostream& out, const std::vector<Point3>& pts,
                      PlyEncoding enc = PlyEncoding::binary_little_endian) {
    out << "ply\nformat " << (enc == PlyEncoding::ascii ? "ascii" : "binary_little_endian")
        << " 1.0\nelement vertex " << pts.size()
        << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
    for (const auto& p : pts) {
        if (enc == PlyEncoding::ascii) {
            out << format_real(p.x()) << ' ' << format_real(p.y()) << ' ' << format_real(p.z()) << '\n';
        } else {
            const double xyz[3] = {p.x(), p.y(), p.z()};
            out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
        }
    }
}

inline void write_ply(const std::string& path, const std::vector<Point3>& pts,
                      PlyEncoding enc = PlyEncoding::binary_little_endian) {
    auto out = open_output(path, std::ios::out | std::ios::binary);
    write_ply(out, pts, enc);
}

}  // namespace smlmreg
