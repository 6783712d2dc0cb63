"""Offline LMI synthesis of invariant ellipsoidal terminal sets."""

from ellipsoid_synthesis.synthesis import (
    SynthesisError,
    SynthesisInput,
    SynthesisResult,
    audit_blocks,
    bound_headroom,
    input_from_scenario_dict,
    lmi_blocks,
    load_input,
    steady_state_inputs,
    synthesize_ellipsoid,
)

__all__ = [
    "SynthesisError",
    "SynthesisInput",
    "SynthesisResult",
    "audit_blocks",
    "bound_headroom",
    "input_from_scenario_dict",
    "lmi_blocks",
    "load_input",
    "steady_state_inputs",
    "synthesize_ellipsoid",
]
