#include "labkit/confocal.hpp"
#include "labkit/interfuses.hpp"
#include "labkit/odmr.hpp"
#include "labkit/remote.hpp"
#include "labkit/sim_instruments.hpp"
#include "labkit/tasks.hpp"

namespace labkit {

ModuleRegistry builtin_registry() {
  ModuleRegistry r;
  sim::register_sim_instruments(r);
  register_confocal(r);
  register_odmr(r);
  register_interfuses(r);
  register_tasks(r);
  r.set_remote_factory(remote::make_proxy);
  return r;
}

}  // namespace labkit
