#pragma once

namespace mflq {

/// One classical Runge-Kutta step of dy/ds = f(y) for an autonomous right-hand side.
/// `project` is applied to every stage argument and to the result (e.g. symmetrization).
template <typename State, typename Rhs, typename Project, typename Scalar>
[[nodiscard]] State rk4_step(const State& y, Scalar h, Rhs&& f, Project&& project)
{
    const State k1 = f(y);
    const State k2 = f(project(State(y + (h / Scalar(2)) * k1)));
    const State k3 = f(project(State(y + (h / Scalar(2)) * k2)));
    const State k4 = f(project(State(y + h * k3)));
    return project(State(y + (h / Scalar(6)) * (k1 + Scalar(2) * k2 + Scalar(2) * k3 + k4)));
}

template <typename State, typename Rhs, typename Scalar>
[[nodiscard]] State rk4_step(const State& y, Scalar h, Rhs&& f)
{
    return rk4_step(y, h, f, [](const State& s) { return s; });
}

} // namespace mflq
