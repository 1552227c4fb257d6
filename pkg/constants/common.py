class CommonConstants:
    __slots__ = ()

    # Desk-scale default workload sizes
    DefaultQueryCount = 64
    DefaultCachedTokenCount = 512
    DefaultCurrentTokenCount = 256
    DefaultHeadDim = 128
    DefaultHeadCount = 4

    # Chosen so median attention mass shift at INT2 is well above the noise floor
    DefaultScoreScale = 1.25

    DefaultSeed = 0

    # Exit codes of the CLI
    ExitCodeSuccess = 0
    ExitCodeUsageError = 1
    ExitCodeDataError = 2
    ExitCodeAcceptanceFailure = 3
