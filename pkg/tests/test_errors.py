"""
Tests for error classification.
"""

from latent_accel.errors import ErrorClassifier, ErrorSeverity, ErrorType, LatentSimError


class TestErrorClassification:

    def test_severity_is_derived(self):
        error = LatentSimError(message="bad file", error_type=ErrorType.IO)
        assert error.severity == ErrorSeverity.CRITICAL
        assert error.context == {}
        assert error.error_id

    def test_sweep_failures_are_recoverable(self):
        for error_type in (ErrorType.NON_FINITE, ErrorType.STEP_UNDERFLOW, ErrorType.MAX_STEPS,
                           ErrorType.DIVERGENCE, ErrorType.DOMAIN):
            assert ErrorClassifier.is_recoverable(error_type)
        assert not ErrorClassifier.is_recoverable(ErrorType.CONFIGURATION)
        assert not ErrorClassifier.is_recoverable(ErrorType.CHECKPOINT_FORMAT)

    def test_to_dict(self):
        error = LatentSimError(message="stalled", error_type=ErrorType.MAX_STEPS,
                               context={'n_fcalls': 700})
        data = error.to_dict()
        assert data['error_type'] == "max_steps"
        assert data['severity'] == "low"
        assert data['context'] == {'n_fcalls': 700}
        assert 'stack_trace' not in data

    def test_str_lists_context(self):
        error = LatentSimError(message="NaN", error_type=ErrorType.NON_FINITE,
                               context={'layer': 2})
        assert str(error) == "LatentSimError(non_finite): NaN [layer=2]"
