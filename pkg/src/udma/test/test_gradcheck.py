import unittest

import numpy as np

import udma.gradcheck as GC
import udma.taxonomy as TAX


class GradcheckTest_toy_problem(unittest.TestCase):

    def test_every_category_on_both_sides(self):
        problem = GC.toy_problem(0)
        self.assertEqual(problem.source.priors.flags(), {'car': 1, 'ground': 1, 'wall': 1})
        self.assertEqual(problem.target.priors.flags(), {'car': 1, 'ground': 1, 'wall': 1})
        self.assertEqual(problem.source.network_input.shape, (3, GC.TOY_SIZE, GC.TOY_SIZE))
        self.assertEqual(len(problem.target.node_masks), 4)
        self.assertEqual(problem.source.labels[0, 0], TAX.IGNORE_ID)

    def test_checked_parameters_exist(self):
        named = GC.toy_problem(1).udma_model.named_parameters()
        for name in GC.GENERATOR_CHECKED + GC.DISCRIMINATOR_CHECKED:
            self.assertIn(name, named)
        for stage in ('enc1', 'enc2', 'bottleneck', 'dec2', 'dec1'):
            self.assertIn(f"extractor.{stage}.weight", GC.GENERATOR_CHECKED)
        self.assertIn('node_linear.bias', GC.GENERATOR_CHECKED)
        self.assertIn('edge_linear.bias', GC.GENERATOR_CHECKED)
        self.assertEqual(GC.checked_parameters('ce'), GC.GENERATOR_CHECKED)
        self.assertEqual(len(GC.checked_parameters('instance_discriminator')),
                         len(GC.GENERATOR_CHECKED) + len(GC.DISCRIMINATOR_CHECKED))

    def test_losses_are_rebuilt_from_current_parameters(self):
        problem = GC.toy_problem(2)
        f = GC.loss_function(problem, 'ce')
        before = f(None).item()
        problem.udma_model.seg_bias.data[TAX.CAR] += 1.0
        self.assertNotEqual(f(None).item(), before)


class GradcheckTest_losses(unittest.TestCase):

    def test_all_losses_pass(self):
        for seed in range(20):
            results_df = GC.check_losses(seed, max_elements=3)
            self.assertEqual(set(results_df['loss']), set(GC.LOSS_NAMES))
            failed = results_df.loc[~results_df['passed']]
            self.assertTrue(failed.empty, failed.to_string())
            self.assertTrue(np.all(results_df['max_rel_error'] <= 1e-4))

    def test_summary(self):
        results_df = GC.run_grad_checks([3], max_elements=2)
        summary_df = GC.summarize(results_df)
        self.assertEqual(list(summary_df['loss']), list(GC.LOSS_NAMES))
        ce_row = summary_df.loc[summary_df['loss'] == 'ce'].iloc[0]
        self.assertEqual(ce_row['n_checked'], 2 * len(GC.GENERATOR_CHECKED))
        self.assertTrue(bool(summary_df['passed'].all()))


if __name__ == '__main__':
    unittest.main()
