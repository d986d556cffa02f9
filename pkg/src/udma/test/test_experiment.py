import io
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

import udma.config as CFG
import udma.dataio as DIO
import udma.experiment as EXP
from udma.errors import ConfigError

ACCEPTANCE = os.environ.get('UDMA_ACCEPTANCE') == '1'
ACCEPTANCE_CONFIG = os.path.join(os.path.dirname(__file__), '..', '..', '..', 'config', 'experiment.conf')


def reduced_config():
    return CFG.build_config({
        'range_width': 64, 'range_height': 8,
        'feature_dim': 4, 'base_channels': 2, 'knn_k': 2, 'disc_hidden': 8,
        'train_steps': 2, 'fine_tune_steps': 2,
        'synth_scans': 2, 'synth_sources': 2, 'synth_eval_scans': 1,
        'lambda_sa': 0.01, 'lambda_ia': 0.01, 'seed': 5,
    })


class ExperimentTest_reduced(unittest.TestCase):
    """ the experiment code path at a size that runs in seconds """

    def test_runs_and_is_deterministic(self):
        summaries, logs = [], []
        for _ in range(2):
            with tempfile.TemporaryDirectory() as tmp:
                summary_df = EXP.run_experiment(reduced_config(), tmp)
                self.assertTrue(os.path.exists(os.path.join(tmp, 'summary.csv')))
                with open(os.path.join(tmp, 'metrics.jsonl')) as log_file:
                    logs.append(log_file.read())
            summaries.append(summary_df)

        summary_df = summaries[0]
        self.assertEqual(list(summary_df['variant']), list(EXP.experiment_variants) + [EXP.FINE_TUNED])
        self.assertTrue(np.all(np.isfinite(summary_df['miou'])))
        self.assertTrue(np.all((summary_df['miou'] >= 0) & (summary_df['miou'] <= 1)))
        self.assertEqual(float(summary_df.loc[0, 'gain_over_source_only']), 0.0)
        pd.testing.assert_frame_equal(summaries[0], summaries[1])
        self.assertEqual(logs[0], logs[1])

        log_df = pd.read_json(io.StringIO(logs[0]), lines=True)
        self.assertEqual(set(log_df['variant']), set(EXP.experiment_variants) | {EXP.FINE_TUNED})
        self.assertEqual(len(log_df), 2 * len(EXP.experiment_variants) + 2)
        self.assertIn('variant', EXP.format_summary(summary_df))


def short_acceptance_config():
    """ the acceptance settings with fewer scenes and steps """
    values = dict(DIO.load_config(ACCEPTANCE_CONFIG))
    values.update({'train_steps': 120, 'fine_tune_steps': 60,
                   'synth_scans': 40, 'synth_sources': 40, 'synth_eval_scans': 10})
    return CFG.build_config(values)


class ExperimentTest_directions(unittest.TestCase):

    def test_alignment_then_fine_tuning_improve_target_miou(self):
        summary_df = EXP.run_experiment(short_acceptance_config(), variants=['source_only', 'full'])
        summary_df = summary_df.set_index('variant')
        self.assertEqual(list(summary_df.index), ['source_only', 'full', EXP.FINE_TUNED])
        self.assertGreater(summary_df.loc['full', 'miou'], summary_df.loc['source_only', 'miou'])
        self.assertGreater(summary_df.loc[EXP.FINE_TUNED, 'miou'], summary_df.loc['full', 'miou'])

    def test_variant_subset_needs_the_baseline_and_full(self):
        with self.assertRaises(ConfigError):
            EXP.run_experiment(reduced_config(), variants=['full'])
        with self.assertRaises(ConfigError):
            EXP.run_experiment(reduced_config(), variants=['source_only', 'full', 'no_gan'])


@unittest.skipUnless(ACCEPTANCE, "set UDMA_ACCEPTANCE=1 to run the full adaptation experiment")
class ExperimentTest_acceptance(unittest.TestCase):

    def test_adaptation_claims(self):
        summary_df = EXP.run_experiment(DIO.load_config(ACCEPTANCE_CONFIG)).set_index('variant')
        source_only = summary_df.loc['source_only', 'miou']
        full = summary_df.loc['full', 'miou']
        self.assertGreaterEqual(full - source_only, 0.05)
        self.assertLess(summary_df.loc['no_sa', 'miou'], full)
        self.assertLess(summary_df.loc['no_ia', 'miou'], full)
        self.assertGreater(summary_df.loc[EXP.FINE_TUNED, 'miou'], full)
        self.assertTrue(0.40 <= summary_df.loc['full', 'balanced_accuracy'] <= 0.60)


if __name__ == '__main__':
    unittest.main()
