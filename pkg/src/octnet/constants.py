CLASS_NAMES = ("CNV", "DME", "DRUSEN", "NORMAL")
NUM_CLASSES = len(CLASS_NAMES)
INPUT_SHAPE = (150, 150, 3)
SPLITS = ("train", "val", "test")
ARCHITECTURES = ("vanilla_cnn", "xception", "resnet50", "mobilenetv2")
