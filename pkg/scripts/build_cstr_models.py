#!/usr/bin/env python3
"""Regenerate the bundled CSTR deviation-form model files and scenarios.

Loads models/cstr.model, solves for its operating point, and writes

  models/cstr_deviation.model   reactor in deviation coordinates (the
                                monitoring setup: temperature outputs,
                                total-reactant functional, rate and
                                heat-transfer uncertainties)
  models/cstr_fault.model       deviation reactor with an added analytical
                                concentration measurement, a ramp-prone
                                sensor fault f1 and a step-prone coolant
                                inlet temperature fault f2
  models/fig1.scenario          start-up run with constant disturbances
  models/fig1_nodist.scenario   identical run with disturbances off
  models/fig3.scenario          fault-injection run for the observer bank
  models/step_f1.scenario       pure step on the sensor channel

Everything is deterministic; re-running reproduces the committed files.
"""

from pathlib import Path

from funcobs.model import find_steady_state, load_model

ROOT = Path(__file__).resolve().parent.parent / "models"

RATE = ("A1*exp(-E1/(th' + ths))*A2*exp(-E2/(th' + ths))*(cA' + cAs)*(cB' + cBs)*Z"
        "/(1 + A2*exp(-E2/(th' + ths))*(cB' + cBs))"
        " + A3*exp(-E3/(th' + ths))*(cA' + cAs)*(cB' + cBs)")
RATE_SS = ("A1*exp(-E1/ths)*A2*exp(-E2/ths)*cAs*cBs*Z/(1 + A2*exp(-E2/ths)*cBs)"
           " + A3*exp(-E3/ths)*cAs*cBs")


def param_block(m, op):
    lines = [f"{k} = {v!r}" for k, v in m.params.items()]
    lines += [f"{s}s = {float(v)!r}" for s, v in zip(m.states, op.values)]
    return "\n".join(lines)


def main():
    m = load_model(ROOT / "cstr.model")
    op = find_steady_state(m, (1.2, 0.2, 386.0, 301.0), tol=1e-13, max_iter=200)
    print(f"operating point: {dict(zip(m.states, op.values))}")
    print(f"residual: {op.residual:.3e}")
    xs = dict(zip(m.states, map(float, op.values)))

    deviation = f"""\
# CSTR of cstr.model in deviation coordinates: axes translated so the
# operating point sits at the origin.  Generated by
# scripts/build_cstr_models.py; do not edit the baked steady-state params.
#
# Operating point (SI-seconds model): cA,s = {xs['cA']!r}, cB,s = {xs['cB']!r},
# th,s = {xs['th']!r} K, thJ,s = {xs['thJ']!r} K.

[states]
cA' cB' th' thJ'

[params]
{param_block(m, op)}

[dynamics]
cA''  = (F/V)*(cAin - (cA' + cAs)) - ({RATE} + w1)
cB''  = (F/V)*(cBin - (cB' + cBs)) - ({RATE} + w1)
th''  = (F/V)*(thIn - (th' + ths)) + (dHr/(rho*cp))*({RATE} + w1) - ((UA + w2)/(rho*cp*V))*((th' + ths) - (thJ' + thJs))
thJ'' = (Fj/Vj)*(thJin - (thJ' + thJs)) + ((UA + w2)/(rhoJ*cpJ*Vj))*((th' + ths) - (thJ' + thJs))

[outputs]
y1 = th'
y2 = thJ'

[functional]
z = cA' + cB'

[disturbances]
w1 w2

[box]
cA'  = -1.2 .. 1.0
cB'  = -1.2 .. 1.0
th'  = -35.0 .. 10.0
thJ' = -5.0 .. 5.0
"""

    fault = f"""\
# Fault-diagnosis variant of the deviation-form CSTR: an analytical sensor
# for cA is added (measurement y1), the reaction-rate uncertainty w1 is kept,
# and two persistent faults are declared:
#   f1  additive fault of the analytical concentration sensor (ramp-prone)
#   f2  offset in the coolant inlet temperature (step-prone)
# Heat-transfer uncertainty is not modelled here.  Generated by
# scripts/build_cstr_models.py from the same operating point as
# cstr_deviation.model.

[states]
cA' cB' th' thJ'

[params]
{param_block(m, op)}

[dynamics]
cA''  = -(F/V)*cA' - ({RATE} - ({RATE_SS}) + w1)
cB''  = -(F/V)*cB' - ({RATE} - ({RATE_SS}) + w1)
th''  = -(F/V)*th' + (dHr/(rho*cp))*({RATE} - ({RATE_SS}) + w1) - (UA/(rho*cp*V))*(th' - thJ')
thJ'' = -(Fj/Vj)*(thJ' + f2) + (UA/(rhoJ*cpJ*Vj))*(th' - thJ')

[outputs]
y1 = cA' + f1
y2 = th'
y3 = thJ'

[functional]
z = cA' + cB'

[disturbances]
w1

[faults]
f1 f2

[box]
cA'  = -1.2 .. 1.0
cB'  = -1.2 .. 1.0
th'  = -35.0 .. 10.0
thJ' = -5.0 .. 5.0
"""

    fig1 = f"""\
# Start-up of the deviation-form CSTR from an empty, cold reactor, with the
# disturbances held at constant values and an observer initialization error
# of 1 mol/l.
[scenario]
t_end = 12000
h = 0.5

[init]
cA'  = {-xs['cA']!r}
cB'  = {-xs['cB']!r}
th'  = {300.0 - xs['th']!r}
thJ' = {300.0 - xs['thJ']!r}
e0 = 1.0

[signals]
w1 = constant(1e-4)
w2 = constant(0.2)
"""

    fig1_nodist = f"""\
# Same start-up as fig1.scenario with the disturbances switched off; the
# estimation error trace of a decoupled observer must coincide with the
# disturbed run.
[scenario]
t_end = 12000
h = 0.5

[init]
cA'  = {-xs['cA']!r}
cB'  = {-xs['cB']!r}
th'  = {300.0 - xs['th']!r}
thJ' = {300.0 - xs['thJ']!r}
e0 = 1.0

[signals]
w1 = constant(0.0)
w2 = constant(0.0)
"""

    fig3 = """\
# Fault-injection run for the two-observer bank on cstr_fault.model: the
# plant starts at its operating point, the sensor fault ramps from 2000 s,
# the coolant inlet fault steps to 10 at 5000 s, the rate uncertainty is a
# small constant.  Both observers start with initialization error 1.
[scenario]
t_end = 30000
h = 0.5

[init]
e0 = 1.0

[signals]
w1 = constant(1e-4)
f1 = ramp(2000, 0.001)
f2 = step(5000, 10)
"""

    step_f1 = """\
# Pure step on the analytical-sensor channel, run through the bank designed
# for a ramp-prone f1: a step is a zero-slope ramp, so the ramp observer
# must converge to the step value as well.
[scenario]
t_end = 25000
h = 0.5

[init]
e0 = 1.0

[signals]
w1 = constant(1e-4)
f1 = step(2000, 1)
f2 = constant(0.0)
"""

    for name, text in [("cstr_deviation.model", deviation),
                       ("cstr_fault.model", fault),
                       ("fig1.scenario", fig1),
                       ("fig1_nodist.scenario", fig1_nodist),
                       ("fig3.scenario", fig3),
                       ("step_f1.scenario", step_f1)]:
        (ROOT / name).write_text(text)
        print(f"wrote models/{name}")


if __name__ == "__main__":
    main()
