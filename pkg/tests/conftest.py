import numpy as np

from crtdr.data import TrialDataset


def make_dataset(sizes, treatment, outcome, x=None, c=None, n_population=None,
                 pi=0.5, full_enrollment=True, cluster_ids=None):
    """Assemble a TrialDataset from per-cluster pieces.

    `sizes` gives enrolled counts, `outcome` is the flat individual
    vector (NaN for missing), `x` maps individual covariate names to
    flat vectors, `c` maps cluster covariate names to length-m vectors.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    m = len(sizes)
    if n_population is None:
        n_population = sizes.astype(float) if full_enrollment else np.full(m, np.nan)
    x = x or {}
    c = c or {}
    n = int(sizes.sum())
    x_values = (np.column_stack([np.asarray(v, dtype=float) for v in x.values()])
                if x else np.zeros((n, 0)))
    c_values = (np.column_stack([np.asarray(v, dtype=float) for v in c.values()])
                if c else np.zeros((m, 0)))
    if cluster_ids is None:
        cluster_ids = np.array([f"cl{i}" for i in range(m)], dtype=object)
    return TrialDataset(
        cluster_ids=np.asarray(cluster_ids, dtype=object),
        treatment=np.asarray(treatment, dtype=np.int64),
        m_enrolled=sizes,
        n_population=np.asarray(n_population, dtype=float),
        cluster_index=np.repeat(np.arange(m), sizes),
        outcome=np.asarray(outcome, dtype=float),
        x_names=tuple(x.keys()),
        x_values=x_values,
        c_names=tuple(c.keys()),
        c_values=c_values,
        pi=pi,
        full_enrollment=full_enrollment,
    )
