#pragma once

#include <stdexcept>
#include <string>

namespace loramix {

/// Base of every error raised by the engine. Each subclass names one failure
/// family so callers (and the CLI) can map it to a diagnostic.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
    virtual const char *kind() const noexcept { return "error"; }
};

#define LORAMIX_DEFINE_ERROR(Name, tag)                          \
    class Name : public Error {                                  \
       public:                                                   \
        using Error::Error;                                      \
        const char *kind() const noexcept override { return tag; } \
    };

LORAMIX_DEFINE_ERROR(DimensionError, "dimension error")
LORAMIX_DEFINE_ERROR(EvaluationError, "evaluation error")
LORAMIX_DEFINE_ERROR(ConfigError, "configuration error")
LORAMIX_DEFINE_ERROR(RoutingError, "routing error")
LORAMIX_DEFINE_ERROR(IndexError, "index error")
LORAMIX_DEFINE_ERROR(DomainError, "domain error")
LORAMIX_DEFINE_ERROR(StatisticsError, "statistics error")
LORAMIX_DEFINE_ERROR(AnchorError, "anchor error")
LORAMIX_DEFINE_ERROR(LabelError, "label error")
LORAMIX_DEFINE_ERROR(PropagationError, "propagation error")
LORAMIX_DEFINE_ERROR(DivergenceError, "divergence error")
LORAMIX_DEFINE_ERROR(SpecError, "spec error")
LORAMIX_DEFINE_ERROR(StreamError, "stream error")
LORAMIX_DEFINE_ERROR(IOError, "I/O error")
LORAMIX_DEFINE_ERROR(ExportError, "export error")
LORAMIX_DEFINE_ERROR(FormatError, "format error")
LORAMIX_DEFINE_ERROR(IntegrityError, "integrity error")
LORAMIX_DEFINE_ERROR(CompositionError, "composition error")

#undef LORAMIX_DEFINE_ERROR

}  // namespace loramix
