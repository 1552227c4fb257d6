class ReportConstants:
    __slots__ = ()

    SchemaVersion = '1.0'

    # Tolerance for row-stochastic checks on attention weights
    RowSumTolerance = 1e-5


class TensorFileConstants:
    __slots__ = ()

    Magic = b'JKVT'
    Version = 1
    HeaderFormat = '<4sBBBB'
    DimFormat = '<Q'
    ItemSize = 4


class ArtifactConstants:
    __slots__ = ()

    ConfigFileName = 'config.json'
    QueriesFileName = 'queries.jkvt'
    KeysFileName = 'keys.jkvt'
    ValuesFileName = 'values.jkvt'
    CacheFileName = 'cache.npz'
    OutputFileName = 'output.jkvt'
    WeightsFileName = 'weights.jkvt'
    ReportFileName = 'report.json'
    DiagnosticsFileName = 'diagnostics.json'
    DeltaHistogramFileName = 'delta_p_s_histogram.csv'
    OracleFileName = 'oracle.json'
    SkewHistogramFileName = 'skew_histogram.csv'
    AcceptanceFileName = 'acceptance.json'
    CurveFileName = 'curve.csv'
    SweepFileName = 'sweep.csv'
