import os
import unittest

import numpy as np
import torch
from testfixtures import TempDirectory

from trajguard import images
from trajguard.exc import InputError, ParameterError


class TestConversion(unittest.TestCase):

    def test_endpoints(self):
        data = torch.tensor([[[-1.0, 0.0, 1.0]]], dtype=torch.float64)
        self.assertEqual([[[0], [128], [255]]],
                         images.to_uint8(data).tolist())
        back = images.from_uint8(np.array([[0, 255]], dtype=np.uint8))
        self.assertEqual([[[-1.0, 1.0]]], back.tolist())

    def test_clamps(self):
        data = torch.tensor([[[-3.0, 3.0]]], dtype=torch.float64)
        self.assertEqual([[[0], [255]]], images.to_uint8(data).tolist())

    def test_bad_shape(self):
        self.assertRaises(ParameterError, images.to_uint8,
                          torch.zeros(2, 4, 4))

    def test_quantize_is_idempotent(self):
        data = images.make_toy_batch(1)[0]
        once = images.quantize(data)
        self.assertLessEqual(float((once - data).abs().max()), 1 / 127.5)
        self.assertTrue(torch.equal(once, images.quantize(once)))


class TestFiles(unittest.TestCase):

    def setUp(self):
        self.tempdir = TempDirectory()
        self.tmp = self.tempdir.path

    def tearDown(self):
        self.tempdir.cleanup()

    def test_png_round_trip(self):
        for data in (images.make_toy_batch(1)[0],
                     images.make_toy_batch(1, shape=(1, 8, 8))[0]):
            path = os.path.join(self.tmp, 'img.png')
            images.save_png(data, path)
            self.assertTrue(torch.equal(images.quantize(data),
                                        images.load_png(path)))

    def test_load_errors(self):
        self.assertRaises(InputError, images.load_png,
                          os.path.join(self.tmp, 'missing.png'))
        path = os.path.join(self.tmp, 'junk.png')
        with open(path, 'wb') as junk:
            junk.write(b'not an image')
        self.assertRaises(InputError, images.load_png, path)

    def test_list_images(self):
        for name in ('b.png', 'a.PNG', 'notes.txt'):
            open(os.path.join(self.tmp, name), 'w').close()
        self.assertEqual(['a.PNG', 'b.png'], images.list_images(self.tmp))
        self.assertRaises(InputError, images.list_images,
                          os.path.join(self.tmp, 'nope'))


class TestCodec(unittest.TestCase):

    def test_jpeg_round_trip(self):
        data = images.make_toy_batch(1, seed=5)[0]
        high = images.jpeg_round_trip(data, 100)
        low = images.jpeg_round_trip(data, 10)
        self.assertEqual(tuple(data.shape), tuple(high.shape))
        self.assertLessEqual(float((high - data).abs().max()), 0.05)
        self.assertGreater(float((low - data).abs().mean()),
                           float((high - data).abs().mean()))

    def test_versions(self):
        versions = images.codec_versions()
        self.assertEqual(set(['pillow', 'torch', 'numpy']), set(versions))


class TestToyBatch(unittest.TestCase):

    def test_seeded(self):
        first = images.make_toy_batch(3, seed=1)
        second = images.make_toy_batch(3, seed=1)
        self.assertEqual(3, len(first))
        for a, b in zip(first, second):
            self.assertTrue(torch.equal(a, b))
            self.assertEqual((3, 16, 16), tuple(a.shape))
            self.assertLessEqual(float(a.abs().max()), 0.9)
        self.assertFalse(torch.equal(first[0], images.make_toy_batch(
            1, seed=2)[0]))


if __name__ == '__main__':
    unittest.main()
