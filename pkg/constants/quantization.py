class QuantizationConstants:
    __slots__ = ()

    SupportedBits = (2, 3, 4, 8)
    # Widths that pack evenly into a byte
    PackableBits = (2, 4, 8)

    # Per-group metadata: FP8 E4M3 scale + BF16 zero-point
    ScaleStorageBits = 8
    ZeroPointStorageBits = 16
    MetadataBitsPerGroup = ScaleStorageBits + ZeroPointStorageBits

    Fp8E4M3MaxMagnitude = 448.0
    Fp8E4M3MantissaBits = 3
    # Smallest normal exponent of E4M3 (bias 7)
    Fp8E4M3MinNormalExponent = -6

    # Below this |alpha| log(sinh(a)/a) is evaluated from its power series
    ExactCorrectionSeriesSwitch = 1e-3
