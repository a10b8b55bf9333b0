# config/config_plant.py
# 合成后处理 (after-treatment) 液压回路的全部常数，集中在这里便于复现和调参。
#
# 三个集总压力节点: p_bp (泵前), p_ap (泵后), p_du (计量单元内)。
#   C_bp * dp_bp/dt = q_in - q_pump
#   C_ap * dp_ap/dt = q_pump - q_byp - q_du
#   C_du * dp_du/dt = q_du - q_ori - q_dose
# 其中
#   q_in   = A_in   * s(p_amb - p_bp)           储罐 -> 泵入口
#   q_pump = k_n * n_p - k_s * (p_ap - p_bp)    泵流量 (含内泄漏)
#   q_byp  = A_byp  * s(p_ap - p_amb)           泵后泄压回流 (故障 f_A_p)
#   q_du   = A_du   * s(p_ap - p_du)            泵 -> 计量单元软管 (故障 f_A_du)
#   q_ori  = A_ori  * s(p_du - p_amb)           计量单元回流节流孔 (故障 f_A_ori)
#   q_dose = A_dose * v * s(p_du - p_amb)       喷嘴, v 为 PWM 阀门开度 (故障 f_A_dose)
# s(dp) = dp / (dp^2 + delta^2)^(1/4) 是正则化的带符号平方根律。
#
# 在 n_p = 2000 rpm、阀门关闭的工作点，线性化最快极点约为 -7.5 1/s，
# 因此默认采样时间 T = 0.2 s 对应 lambda*T ~ -1.5。极点大小约与 1/sqrt(p_ap - p_amb) 成正比:
# 低转速 (n_p < ~1300 rpm) 时 p_du 节点的极点越过 lambda*T = -2。
# A_du / A_ori = 1.5: 阀门关闭时 p_du - p_amb 约为 0.69 * (p_ap - p_amb)，两种堵塞都会明显移动 p_du。

PLANT = {
    "p_amb": 100.0,  # kPa, 储罐/大气压力
    "flow_delta": 2.0,  # kPa, 平方根律的正则化宽度
    "C_bp": 0.1,  # ml/kPa
    "C_ap": 0.02,  # ml/kPa
    "C_du": 0.00164,  # ml/kPa
    "A_in": 3.162,  # ml/s/sqrt(kPa)
    "k_n": 0.006525,  # ml/s/rpm
    "k_s": 0.005,  # ml/s/kPa
    "A_byp": 0.2858,  # ml/s/sqrt(kPa)
    "A_du": 0.2208,  # ml/s/sqrt(kPa)
    "A_ori": 0.1472,  # ml/s/sqrt(kPa)
    "A_dose": 0.1,  # ml/s/sqrt(kPa)
}

# 每种堵塞故障作用的有效面积
FAULT_AREAS = {
    "f_A_du": "A_du",
    "f_A_ori": "A_ori",
    "f_A_p": "A_byp",
    "f_A_dose": "A_dose",
}

SAMPLE_TIME = 0.2  # s
REFERENCE_SUBSTEPS = 20  # 内部参考积分: RK4, 步长 T/20

# PWM: 载波周期可配置，相位未知 (按种子随机)。相位和开关沿落在 T/20 网格上。
PWM = {
    "carrier_period": 0.9,  # s
}

# 激励: 泵转速设定值分段阶跃 (对数均匀)，实际转速按 n_p_slew 限速跟随；前半段计量阀工作，后半段 DC = 0
EXCITATION = {
    "n_p_range": (600.0, 3000.0),  # rpm
    "n_p_hold": (20, 80),  # 样本数
    "n_p_slew": 150.0,  # rpm/s
    "dc_range": (0.1, 0.6),
    "dc_hold": (25, 100),  # 样本数
    "warmup": 30.0,  # s, 记录前的预热时间
}

# 测量噪声: 标准差 = NOISE_FRACTION * 信号量程 (只加在压力信号上)
NOISE_FRACTION = 0.005
SIGNAL_RANGES = {
    "y_p_tp": 20.0,
    "y_p_ap": 1000.0,
    "y_p_du": 1000.0,
}

# 默认故障大小: 堵塞为面积比例，传感器故障为 kPa 偏置
DEFAULT_FAULT_MAGNITUDE = {
    "f_A_du": 0.5,
    "f_A_ori": 0.5,
    "f_A_p": 0.5,
    "f_A_dose": 0.5,
    "f_y_ap": 50.0,
    "f_p_du": 50.0,
}

DATASET_LENGTHS = {
    "train": 4600,
    "val": 2300,
    "fault": 2300,
}
