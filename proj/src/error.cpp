#include "labkit/error.hpp"

namespace labkit {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NotActive: return "NotActive";
    case ErrorKind::UnknownOperation: return "UnknownOperation";
    case ErrorKind::UnknownModule: return "UnknownModule";
    case ErrorKind::OutOfRange: return "OutOfRange";
    case ErrorKind::Busy: return "Busy";
    case ErrorKind::DeviceFault: return "DeviceFault";
    case ErrorKind::NotImplementedByHardware: return "NotImplementedByHardware";
    case ErrorKind::Forbidden: return "Forbidden";
    case ErrorKind::DegenerateData: return "DegenerateData";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorKind::Precondition: return "Precondition";
    case ErrorKind::ActivationFailed: return "ActivationFailed";
    case ErrorKind::Syntax: return "Syntax";
    case ErrorKind::Schema: return "Schema";
    case ErrorKind::Io: return "Io";
    case ErrorKind::Bind: return "Bind";
    case ErrorKind::Connect: return "Connect";
    case ErrorKind::Timeout: return "Timeout";
    case ErrorKind::ConnectionLost: return "ConnectionLost";
    case ErrorKind::Protocol: return "Protocol";
    case ErrorKind::Internal: return "Internal";
  }
  return "Internal";
}

}  // namespace labkit
