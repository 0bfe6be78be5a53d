import ssltr.augment
import ssltr.backbone
import ssltr.config
import ssltr.dataset
import ssltr.errors
import ssltr.experiment
import ssltr.frames
import ssltr.labelgen
import ssltr.ocr
import ssltr.prefetch
import ssltr.pretrain
import ssltr.schedule
import ssltr.training
import ssltr.types
import ssltr.viz

from ssltr.augment import *  # NOQA
from ssltr.backbone import *  # NOQA
from ssltr.config import *  # NOQA
from ssltr.dataset import *  # NOQA
from ssltr.errors import *  # NOQA
from ssltr.experiment import *  # NOQA
from ssltr.frames import *  # NOQA
from ssltr.labelgen import *  # NOQA
from ssltr.ocr import *  # NOQA
from ssltr.prefetch import *  # NOQA
from ssltr.pretrain import *  # NOQA
from ssltr.schedule import *  # NOQA
from ssltr.training import *  # NOQA
from ssltr.types import *  # NOQA
from ssltr.viz import *  # NOQA

__all__ = (
    ssltr.augment.__all__
    + ssltr.backbone.__all__
    + ssltr.config.__all__
    + ssltr.dataset.__all__
    + ssltr.errors.__all__
    + ssltr.experiment.__all__
    + ssltr.frames.__all__
    + ssltr.labelgen.__all__
    + ssltr.ocr.__all__
    + ssltr.prefetch.__all__
    + ssltr.pretrain.__all__
    + ssltr.schedule.__all__
    + ssltr.training.__all__
    + ssltr.types.__all__
    + ssltr.viz.__all__
)
