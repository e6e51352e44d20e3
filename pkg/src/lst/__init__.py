"""Exact O(d^2) gradient updates for linear output layers with large sparse targets."""

from .factored import (
    DegenerateOutput,
    FactoredOutputLayer,
    SingularUpdate,
    StepResult,
    factored_new,
    factored_step,
    load_checkpoint,
    maintenance_residuals,
    materialize,
    online_step_madds,
    output_sq_norm,
    restore_pristine,
    save_checkpoint,
    selected_outputs,
    spherical_softmax_value,
)
from .minibatch import (
    SOLVE_EACH_BATCH,
    WOODBURY,
    InverseStrategy,
    MinibatchResult,
    SingularBatchUpdate,
    default_strategy,
    minibatch_step,
    solve_inverse_transpose_apply,
    woodbury_update_inverse,
)
from .naive import NaiveOutputLayer, naive_forward, naive_step, naive_step_minibatch
from .sparse import (
    DatasetHeader,
    SparseVec,
    format_sparse_line,
    gather_rows_weighted,
    input_forward,
    input_update,
    parse_sparse_line,
    random_sparse,
    read_sparse_examples,
    scatter_rank_one,
    sparse_dot,
    sparse_sq_norm,
    write_sparse_examples,
)
from .stabilization import (
    FixEvent,
    SingularMatrixError,
    SingularTriplet,
    StabilizationConfig,
    fix_singular_value,
    maybe_stabilize,
    power_extreme_singular,
    recompute_inverse_transpose,
    singular_stabilize,
)

__version__ = "0.1.0"
