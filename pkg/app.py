# app.py - Streamlit console for running experiment plans and checking communication budgets
import tempfile
from pathlib import Path
from typing import Dict, List, Optional

import streamlit as st
import yaml

from analysis import AccountingMode, bit_accounting, vote_error_oracle
from cli import SWEEP_AXES, ExperimentPlan, PlanResult, run_plan
from config import ConfigError, Schedule, TiePolicy, config_from_dict, derive_weights, env_workers

BIT_RATE_MODELS = {"EMNIST MLP": 23_860, "Fashion-MNIST CNN": 421_642}


# === PURE HELPERS (no Streamlit calls) ===
def parse_values(text: str) -> tuple:
    return tuple(v.strip() for v in (text or "").split(",") if v.strip())


def plan_from_form(yaml_text: Optional[str], axis: str, values: str, seeds: str, synthetic: bool,
                   subsample: Optional[int], workers: int, output_dir: Path) -> ExperimentPlan:
    """Turn sidebar inputs into an ExperimentPlan; raises ConfigError on bad input."""
    try:
        raw = yaml.safe_load(yaml_text) if yaml_text else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"uploaded config is not valid YAML: {e}") from e
    try:
        seed_list = tuple(int(s) for s in parse_values(seeds))
    except ValueError as e:
        raise ConfigError(f"seeds must be integers: {e}") from e
    sweep_values = parse_values(values)
    return ExperimentPlan(
        config=config_from_dict(raw),
        sweep_axis=axis if axis != "none" and sweep_values else None,
        sweep_values=sweep_values if axis != "none" else (),
        seeds=seed_list or (0,),
        output_dir=output_dir,
        workers=workers,
        synthetic=synthetic,
        subsample=subsample or None,
    )


def summary_rows(result: PlanResult) -> List[Dict]:
    """Final-round row per (sweep value, seed) for the results table."""
    last: Dict[tuple, Dict] = {}
    for record in result.records:
        if record.record_type != "round":
            continue
        key = (record.sweep_value, record.seed)
        if key not in last or record.t > last[key]["t"]:
            last[key] = {
                "sweep value": record.sweep_value or "-", "seed": record.seed, "t": record.t,
                "algorithm": record.algorithm, "train loss": record.train_loss,
                "test accuracy": record.test_acc, "grad l1": record.grad_l1,
            }
    return [last[key] for key in sorted(last)]


def budget_rows(d: int, edge_rounds: int, devices_per_edge: List[int], interval_s: float,
                active_components: Optional[int] = None) -> List[Dict]:
    schedule = Schedule(edge_rounds=edge_rounds)
    hierarchy = derive_weights([[1] * m for m in devices_per_edge])
    rows = []
    for mode in AccountingMode:
        if mode is AccountingMode.QUANTIZED_DOWNLINK and active_components is None:
            continue
        budget = bit_accounting(d, schedule, hierarchy, mode, interval_s, active_components)
        rows.append({
            "mode": mode.value,
            "payload bits/device/step": budget.device_payload_bits,
            "uplink Mbps/device": round(budget.uplink_rate_mbps, 3),
            "uplink bits/round": budget.uplink_bits_per_round,
            "downlink bits/round": budget.downlink_bits_per_round,
        })
    return rows


def vote_rows(p: float, cluster_sizes: List[int]) -> List[Dict]:
    return [{"M": m, "vote error": round(vote_error_oracle(p, m, TiePolicy.RANDOM), 5), "device error": p}
            for m in cluster_sizes]


# === UI ===
def sidebar_form():
    st.sidebar.title("🧪 Experiment Plan")
    uploaded = st.sidebar.file_uploader("YAML config (optional)", type=["yaml", "yml"])
    axis = st.sidebar.selectbox("Sweep axis", ("none",) + SWEEP_AXES)
    values = st.sidebar.text_input("Sweep values", placeholder="e.g. 10,30,90 or 6x8,12x4")
    seeds = st.sidebar.text_input("Seeds", value="0")
    synthetic = st.sidebar.checkbox("Synthetic quadratic", value=True)
    subsample = st.sidebar.number_input("Subsample (0 = full set)", min_value=0, value=0, step=1000)
    workers = st.sidebar.number_input("Edge workers", min_value=1, value=env_workers(1), step=1)
    return {
        "yaml_text": uploaded.getvalue().decode("utf-8") if uploaded is not None else None,
        "axis": axis, "values": values, "seeds": seeds, "synthetic": synthetic,
        "subsample": int(subsample), "workers": int(workers),
    }


def show_results(result: PlanResult):
    st.success(f"✅ Plan finished: {len(result.records)} records, {len(result.files)} files")
    st.dataframe(summary_rows(result), use_container_width=True)
    out = Path(result.files[0]).parent
    col1, col2 = st.columns(2)
    with col1:
        st.download_button("📥 summary.csv", (out / "summary.csv").read_bytes(),
                           file_name="summary.csv", mime="text/csv")
    with col2:
        st.download_button("📥 manifest.json", (out / "manifest.json").read_bytes(),
                           file_name="manifest.json", mime="application/json")


def budget_panel():
    st.header("📡 Communication Budget")
    col1, col2, col3 = st.columns(3)
    with col1:
        d = st.number_input("Model dimension d", min_value=1, value=BIT_RATE_MODELS["EMNIST MLP"])
    with col2:
        edge_rounds = st.number_input("Edge rounds T_E", min_value=1, value=30)
    with col3:
        interval_ms = st.number_input("Reporting interval (ms)", min_value=0.1, value=10.0)
    devices = st.text_input("Devices per edge", value="5,5,5,5")
    n = st.number_input("Downlink active components n (0 = off)", min_value=0, value=0)
    try:
        rows = budget_rows(int(d), int(edge_rounds), [int(m) for m in parse_values(devices)],
                           interval_ms / 1000.0, int(n) or None)
        st.table(rows)
    except (ConfigError, ValueError) as e:
        st.error(f"❌ {e}")

    st.subheader("Majority vote vs single device")
    p = st.slider("Device sign error p", min_value=0.01, max_value=0.49, value=0.3)
    st.table(vote_rows(p, [1, 3, 5, 7, 9]))


def main():
    st.set_page_config(page_title="HierSign Console", page_icon="📶", layout="wide",
                       initial_sidebar_state="expanded")
    st.title("📶 Hierarchical Sign-SGD Console")

    form = sidebar_form()
    if st.sidebar.button("Run plan", type="primary"):
        try:
            out = Path(tempfile.mkdtemp(prefix="hiersign-"))
            plan = plan_from_form(output_dir=out, **form)
            with st.spinner("Running plan..."):
                st.session_state.last_result = run_plan(plan)
        except Exception as e:
            st.error(f"❌ Run failed: {e}")

    if "last_result" in st.session_state:
        show_results(st.session_state.last_result)
    else:
        st.info("Configure a plan in the sidebar and press Run plan.")

    budget_panel()


if __name__ == "__main__":
    main()
