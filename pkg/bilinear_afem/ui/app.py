"""
Adaptive FEM for Bilinear Optimal Control - Streamlit UI

Launch benchmark runs and inspect the per-iteration records, the fitted
convergence rates and the final effectivity index. Tables only; plotting is
left to whatever tool reads the CSV.

Run with: streamlit run bilinear_afem/ui/app.py
"""

import math
import sys
from pathlib import Path

import streamlit as st

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from bilinear_afem.benchmark import EXAMPLES
from bilinear_afem.config import build_config
from bilinear_afem.exceptions import ConfigError
from bilinear_afem.main import run
from bilinear_afem.utils import CSV_COLUMNS


# ============================================================================
# PAGE CONFIGURATION
# ============================================================================

st.set_page_config(
    page_title="Bilinear AFEM",
    page_icon="📐",
    layout="wide",
    initial_sidebar_state="collapsed"
)


# ============================================================================
# SESSION STATE MANAGEMENT
# ============================================================================

if 'run_result' not in st.session_state:
    st.session_state.run_result = None

if 'run_config' not in st.session_state:
    st.session_state.run_config = None


def clear_session():
    """Forget the last run."""
    st.session_state.run_result = None
    st.session_state.run_config = None


# ============================================================================
# HELPER FUNCTIONS
# ============================================================================

def records_table(records):
    """LoopRecords as table rows, in CSV column order."""
    return [{column: record.as_row()[column] for column in CSV_COLUMNS} for record in records]


def display_rates(rates):
    st.subheader("📉 Fitted rates vs ndof")
    rows = [{'quantity': name, 'slope': None if math.isnan(slope) else round(slope, 4)}
            for name, slope in rates.items()]
    st.table(rows)


def display_result(result):
    if not result['success']:
        st.error(f"❌ {result['message']}")
        if result['records']:
            st.warning(f"⚠️ {len(result['records'])} iterations completed before the failure")
            st.dataframe(records_table(result['records']), use_container_width=True)
        return

    final = result['records'][-1]
    st.success(f"✅ {result['message']}")
    col1, col2, col3 = st.columns(3)
    col1.metric("Final ndof", f"{final.ndof}")
    col2.metric("Final estimator", f"{final.estimator.est_total:.4e}")
    effectivity = result.get('effectivity', math.nan)
    col3.metric("Effectivity index", "n/a" if math.isnan(effectivity) else f"{effectivity:.3f}")

    st.subheader("📊 Iterations")
    st.dataframe(records_table(result['records']), use_container_width=True)
    display_rates(result['rates'])
    st.caption(f"CSV written to {result['csv_path']} at {result['timestamp']}")


# ============================================================================
# MAIN UI LAYOUT
# ============================================================================

st.title("📐 Adaptive FEM for Bilinear Optimal Control")
st.markdown("Residual estimators, maximum marking and longest-edge bisection")
st.markdown("---")

left_col, right_col = st.columns([1, 2], gap="large")

with left_col:
    st.subheader("⚙️ Run settings")
    scheme = st.radio("Scheme", ['fully', 'semi'], horizontal=True,
                      help="fully: piecewise constant control; semi: variational discretization")
    example = st.selectbox("Example", list(EXAMPLES))
    uniform = st.checkbox("Uniform refinement", value=False)
    marking = st.slider("Marking fraction", min_value=0.05, max_value=0.95, value=0.5, step=0.05,
                        disabled=uniform)
    max_iterations = st.number_input("Max iterations", min_value=0, max_value=60, value=12)
    max_ndof = st.number_input("Max ndof", min_value=100, max_value=500_000, value=20_000, step=1000)
    quad_degree = st.number_input("Quadrature degree", min_value=1, max_value=20, value=19)
    out = st.text_input("Results CSV", value="results/ui_run.csv")

    button_col1, button_col2 = st.columns(2)
    with button_col1:
        run_btn = st.button("▶️ Run", use_container_width=True, type="primary")
    with button_col2:
        clear_btn = st.button("🗑️ Clear", use_container_width=True)

    if run_btn:
        try:
            config = build_config(
                scheme=scheme, example=example, uniform=uniform, marking=float(marking),
                max_iterations=int(max_iterations), max_ndof=int(max_ndof),
                quad_degree=int(quad_degree), out=out,
            )
        except ConfigError as e:
            st.error(f"Invalid settings: {e}")
        else:
            with st.spinner("🔄 Solving... Please wait..."):
                st.session_state.run_result = run(config)
                st.session_state.run_config = config

    if clear_btn:
        clear_session()
        st.rerun()

with right_col:
    if st.session_state.run_result:
        display_result(st.session_state.run_result)
    else:
        st.info("👈 Choose settings and press Run")

st.markdown("---")
st.caption("📐 Bilinear AFEM | numpy, scipy & Streamlit | v1.0")
