// SPDX-License-Identifier: Apache-2.0
#include "ovd/error.hpp"

namespace ovd {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "dimension error";
        case ErrorKind::index: return "index error";
        case ErrorKind::tape: return "tape error";
        case ErrorKind::check: return "check error";
        case ErrorKind::shape: return "shape error";
        case ErrorKind::grouping: return "grouping error";
        case ErrorKind::empty_stream: return "empty-stream error";
        case ErrorKind::generation: return "generation error";
        case ErrorKind::strategy: return "strategy error";
        case ErrorKind::routing: return "routing error";
        case ErrorKind::policy: return "policy error";
        case ErrorKind::threshold: return "threshold error";
        case ErrorKind::cache: return "cache error";
        case ErrorKind::supervision: return "supervision error";
        case ErrorKind::numeric: return "numeric error";
        case ErrorKind::box: return "box error";
        case ErrorKind::template_assembly: return "template error";
        case ErrorKind::stream: return "stream error";
        case ErrorKind::config: return "config error";
        case ErrorKind::parse: return "parse error";
        case ErrorKind::metric: return "metric error";
        case ErrorKind::io: return "io error";
    }
    return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), message_(message) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace ovd
