#pragma once

// Pascal-VOC annotation XML as written by LabelImg:
//   <annotation><filename/>...<object><name/><bndbox><xmin/>...</bndbox></object>...</annotation>

#include <algorithm>
#include <cctype>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "dataset.hpp"
#include "error.hpp"

namespace defectlab::voc {

namespace detail {

inline std::string trim_lower(std::string s) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

inline int read_coordinate(const boost::property_tree::ptree& box, const char* key, std::size_t object_index) {
    const auto text = box.get_optional<std::string>(key);
    if (!text) throw ParseError("object " + std::to_string(object_index) + ": missing <" + key + ">", 0);
    // LabelImg writes integers; some tools emit "12.0".
    try {
        std::size_t used = 0;
        const double v = std::stod(*text, &used);
        if (trim_lower(text->substr(used)).size() != 0) throw std::invalid_argument(*text);
        return static_cast<int>(std::lround(v));
    } catch (const std::exception&) {
        throw ParseError("object " + std::to_string(object_index) + ": <" + key + "> is not a number: '" + *text + "'",
                         0);
    }
}

}  // namespace detail

/// One Annotation per <object>. Label names are matched case-insensitively
/// after trimming; unknown names raise LabelError naming the offender.
/// `image_id` defaults to the <filename> element when empty.
inline std::vector<Annotation> parse_voc_xml(const std::string& xml_text, const LabelMap& label_map,
                                             std::string image_id = {}) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        std::istringstream in(xml_text);
        pt::read_xml(in, tree);
    } catch (const pt::xml_parser_error& e) {
        throw ParseError("malformed VOC XML: " + e.message(), static_cast<int>(e.line()));
    }
    const auto root = tree.get_child_optional("annotation");
    if (!root) throw ParseError("VOC XML has no <annotation> root", 0);
    if (image_id.empty()) image_id = root->get<std::string>("filename", "");

    std::vector<Annotation> out;
    std::size_t index = 0;
    for (const auto& [key, node] : *root) {
        if (key != "object") continue;
        const auto raw_name = node.get_optional<std::string>("name");
        if (!raw_name) throw ParseError("object " + std::to_string(index) + ": missing <name>", 0);
        const auto name = detail::trim_lower(*raw_name);
        const auto it = label_map.find(name);
        if (it == label_map.end()) throw LabelError("unknown class name '" + *raw_name + "' in '" + image_id + "'");
        const auto box = node.get_child_optional("bndbox");
        if (!box) throw ParseError("object " + std::to_string(index) + ": missing <bndbox>", 0);
        Annotation a;
        a.image_id = image_id;
        a.label = it->second;
        a.box = {detail::read_coordinate(*box, "xmin", index), detail::read_coordinate(*box, "ymin", index),
                 detail::read_coordinate(*box, "xmax", index), detail::read_coordinate(*box, "ymax", index)};
        out.push_back(std::move(a));
        ++index;
    }
    return out;
}

// Inverse of parse_voc_xml for fixtures and exported annotations.
inline std::string write_voc_xml(const std::string& filename, int width, int height,
                                 const std::vector<Annotation>& anns) {
    std::ostringstream o;
    o << "<annotation>\n  <filename>" << filename << "</filename>\n  <size>\n    <width>" << width
      << "</width>\n    <height>" << height << "</height>\n    <depth>1</depth>\n  </size>\n";
    for (const auto& a : anns) {
        o << "  <object>\n    <name>" << class_name(a.label) << "</name>\n    <bndbox>\n      <xmin>" << a.box.xmin
          << "</xmin>\n      <ymin>" << a.box.ymin << "</ymin>\n      <xmax>" << a.box.xmax << "</xmax>\n      <ymax>"
          << a.box.ymax << "</ymax>\n    </bndbox>\n  </object>\n";
    }
    o << "</annotation>\n";
    return o.str();
}

}  // namespace defectlab::voc
