import pytest

from src.config import RunConfig
from src.validators import RunConfigValidator, ValidationResult, load_schema, schema_errors


class TestRunConfigValidator:

    def setup_method(self):
        self.validator = RunConfigValidator()

    def _config(self, **options):
        return RunConfig(subcommand='train-scr', seed=0, options=options)

    def test_valid_config(self, tmp_path):
        images = tmp_path / 'images'
        images.mkdir()
        config = RunConfig(
            subcommand='train-scr',
            input_paths={'images_dir': images},
            output_paths={'checkpoint': tmp_path / 'ckpt'},
            options={'seed': 0, 'epochs': 200, 'lr': 0.01, 'jobs': 2},
        )

        result = self.validator.validate(config)

        assert isinstance(result, ValidationResult)
        assert result.is_valid is True
        assert len(result.errors) == 0
        assert len(result.warnings) == 0

    def test_missing_input_path(self, tmp_path):
        config = RunConfig(subcommand='grade', input_paths={'annotations': tmp_path / 'absent.json'})

        result = self.validator.validate(config)

        assert result.is_valid is False
        assert any('annotations' in error and 'does not exist' in error for error in result.errors)

    def test_optional_paths_are_skipped(self):
        config = RunConfig(subcommand='grade', input_paths={'images_dir': None}, output_paths={'out': None})

        assert self.validator.validate(config).is_valid is True

    def test_output_directory_occupied_by_file(self, tmp_path):
        blocker = tmp_path / 'out_dir'
        blocker.write_text('x')
        config = RunConfig(subcommand='split', output_paths={'out_dir': blocker})

        result = self.validator.validate(config)

        assert result.is_valid is False
        assert any('is not a directory' in error for error in result.errors)

    def test_output_file_occupied_by_directory(self, tmp_path):
        config = RunConfig(subcommand='grade', output_paths={'out': tmp_path})

        result = self.validator.validate(config)

        assert result.is_valid is False
        assert any('is not a file' in error for error in result.errors)

    def test_existing_checkpoint_directory_is_accepted(self, tmp_path):
        config = RunConfig(subcommand='train-scr', output_paths={'checkpoint': tmp_path})

        assert self.validator.validate(config).is_valid is True

    def test_output_below_a_file(self, tmp_path):
        blocker = tmp_path / 'plain.txt'
        blocker.write_text('x')
        config = RunConfig(subcommand='grade', output_paths={'out': blocker / 'report.json'})

        result = self.validator.validate(config)

        assert result.is_valid is False
        assert any('cannot be created' in error for error in result.errors)

    def test_numeric_field_validation(self):
        test_cases = [
            ('seed', -1, 'negative seed'),
            ('epochs', -5, 'negative epochs'),
            ('lr', -0.1, 'negative learning rate'),
            ('jobs', 0, 'no workers'),
            ('threshold', 1.5, 'threshold above one'),
            ('samples', 1, 'single sample'),
            ('channel', 32, 'channel past the last'),
            ('channel', 'seven', 'not numeric'),
            ('epochs', True, 'boolean'),
        ]

        for field, value, description in test_cases:
            result = self.validator.validate(self._config(**{field: value}))

            assert result.is_valid is False, f"Should fail for {description}: {value}"
            field_errors = [error for error in result.errors if field in error]
            assert len(field_errors) > 0, f"Should have error for {field} {description}: {value}"

    def test_numeric_bounds_are_inclusive(self):
        for field, value in [('channel', 0), ('channel', 31), ('threshold', 0.0), ('threshold', 1.0),
                             ('samples', 2), ('epochs', 0)]:
            result = self.validator.validate(self._config(**{field: value}))
            assert result.is_valid is True, f"{field}={value} should be accepted: {result.errors}"

    def test_grading_thresholds(self):
        test_cases = [
            ([0.25, 0.5], 'exactly three'),
            ([0.0, 0.5, 0.75], 'lie in (0, 1)'),
            ([0.25, 0.5, 1.0], 'lie in (0, 1)'),
            ([0.5, 0.25, 0.75], 'strictly increasing'),
            ([0.25, 0.25, 0.75], 'strictly increasing'),
        ]

        for thresholds, fragment in test_cases:
            result = self.validator.validate(self._config(thresholds=thresholds))
            assert result.is_valid is False, f"Should reject {thresholds}"
            assert any(fragment in error for error in result.errors), f"Expected '{fragment}' for {thresholds}"

        assert self.validator.validate(self._config(thresholds=[0.25, 0.5, 0.75])).is_valid is True

    def test_reversed_x_range(self):
        result = self.validator.validate(self._config(x_range=(2.0, -1.0)))

        assert result.is_valid is False
        assert any('reversed' in error for error in result.errors)

    def test_training_warnings(self):
        result = self.validator.validate(self._config(lr=5.0, epochs=20000))

        assert result.is_valid is True
        assert any('unusually large' in warning for warning in result.warnings)
        assert any('long time' in warning for warning in result.warnings)

        result = self.validator.validate(self._config(lr=0.0))
        assert result.is_valid is True
        assert any('unchanged' in warning for warning in result.warnings)


class TestSchemas:

    def test_schemas_load(self):
        for name in ['coco-schema.json', 'neck-config-schema.json', 'grading-report-schema.json']:
            schema = load_schema(name)
            assert isinstance(schema, dict), f"{name} did not load as an object"

    def test_schema_errors_name_the_location(self):
        document = {'images': [{'id': 1, 'file_name': 'a.ppm', 'width': 4}], 'annotations': [], 'categories': []}

        errors = schema_errors(document, 'coco-schema.json')

        assert len(errors) > 0
        assert any(error.startswith('images/0') and 'height' in error for error in errors)

    def test_schema_errors_empty_for_valid_document(self):
        document = {
            'in_channels': [8, 16], 'in_scales': [1, 2],
            'out_channels': [8, 16], 'out_scales': [1, 2],
            'n': 2, 'K': 3,
        }

        assert schema_errors(document, 'neck-config-schema.json') == []

    def test_neck_schema_rejects_unknown_keys(self):
        document = {
            'in_channels': [8], 'in_scales': [1], 'out_channels': [8], 'out_scales': [1], 'depth': 3,
        }

        errors = schema_errors(document, 'neck-config-schema.json')

        assert any('depth' in error for error in errors)

    @pytest.mark.parametrize('n,K', [(0, 1), (1, 0)])
    def test_neck_schema_rejects_non_positive_counts(self, n, K):
        document = {
            'in_channels': [8], 'in_scales': [1], 'out_channels': [8], 'out_scales': [1], 'n': n, 'K': K,
        }

        assert len(schema_errors(document, 'neck-config-schema.json')) > 0
